"""Command-line entry points for every pipeline stage.

All file outputs are atomic (write to temp, rename). The AEMETER_SEED
environment variable overrides the default RNG seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as datamod
from . import network as net
from . import reinforce as rl
from . import simulate as sim
from . import supervised as sup
from .camera import read_png, render, write_png


def default_seed():
    env = os.environ.get("AEMETER_SEED")
    return int(env) if env else 0


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# scenes on disk: scenes.jsonl (seed + spec per line) regenerates the models

def save_scene_set(scenes, out_dir, write_previews=True):
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    records = []
    for i, scene in enumerate(scenes):
        lines.append(json.dumps({
            "seed": scene.seed,
            "spec": scene.spec,
            "optimal_ev": scene.optimal_ev,
        }, sort_keys=True))
        name = f"scene_{i:05d}.png"
        if write_previews:
            write_png(render(scene, scene.optimal_ev),
                      os.path.join(out_dir, name))
        records.append(datamod.ManifestRecord(
            image_path=name, ground_truth_delta_ev=0.0,
            scene_seed=scene.seed))
    _atomic_write_text(os.path.join(out_dir, "scenes.jsonl"),
                       "\n".join(lines) + "\n")
    datamod.save_manifest(records, os.path.join(out_dir, "manifest.tsv"))


def load_scene_set(path):
    """`path` is a scenes.jsonl file or a directory containing one."""
    if os.path.isdir(path):
        path = os.path.join(path, "scenes.jsonl")
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            spec = datamod.SceneSpec.from_dict(entry["spec"])
            scenes.append(datamod.generate_scene(entry["seed"], spec))
    return scenes


def make_scene_set(n, seed, size=64):
    spec = datamod.SceneSpec(size=size)
    return [datamod.generate_scene(seed * 1_000_003 + i, spec)
            for i in range(n)]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_scenes(args):
    scenes = make_scene_set(args.n, args.seed, size=args.size)
    save_scene_set(scenes, args.out, write_previews=not args.no_previews)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_pretrain(args):
    scenes = load_scene_set(args.manifest)
    config = (net.NetConfig.paper_scale() if args.config == "paper_scale"
              else net.NetConfig.desk(uniform_im=args.uniform_im))
    if scenes[0].luminance_field.shape[0] != config.input_size:
        raise SystemExit(f"scene size {scenes[0].luminance_field.shape[0]} "
                         f"!= net input {config.input_size}")
    dataset = datamod.scene_training_pairs(scenes)
    rng = np.random.default_rng(args.seed)
    params = net.build_network(config, rng)
    spec = sup.TrainSpec(epochs=args.epochs, seed=args.seed)
    params, history = sup.pretrain(params, dataset, config, spec)
    net.save_params(params, config, args.out_model)
    sup.write_history(history, args.out_model + ".history.tsv")
    print(f"final train_mse={history[-1].train_mse:.6f} "
          f"val_mse={history[-1].val_mse:.6f}")
    return 0


def _expert_pool(scenes, oracle, seed):
    """Coarse-labeled pool plus oracle eval pairs for one synthetic expert."""
    pool = []
    eval_pairs = []
    rng = np.random.default_rng(seed)
    for scene in scenes:
        start_ev = scene.optimal_ev + rng.uniform(-1.5, 1.5)
        frame = render(scene, start_ev)
        label, gt = datamod.expert_label(frame, oracle,
                                         weights=scene.importance_mask)
        pool.append((frame, label))
        eval_pairs.append((frame.data.transpose(2, 0, 1).astype(np.float32), gt))
    return pool, eval_pairs


def cmd_rl_train(args):
    scenes = load_scene_set(args.manifest)
    params, config = net.load_params(args.model)
    oracle = datamod.default_experts().get(args.expert)
    if oracle is None:
        oracle = datamod.ExpertOracle(expert_id=args.expert, bias_ev=args.bias)
    pool, eval_pairs = _expert_pool(scenes, oracle, args.seed)
    spec = rl.FinetuneSpec(epochs=args.epochs, seed=args.seed)
    params, history = rl.finetune(params, pool, config, spec,
                                  eval_pairs=eval_pairs)
    net.save_params(params, config, args.out_model)
    rl.write_history(history, args.out_model + ".history.tsv")
    print(f"final mean_reward={history[-1].mean_reward:.4f} "
          f"mae={history[-1].mae_if_oracle:.4f}")
    return 0


def cmd_eval(args):
    scenes = load_scene_set(args.manifest)
    experts = datamod.default_experts()
    expert_ids = args.experts.split(",") if args.experts else ["expert_c"]
    rng = np.random.default_rng(args.seed)
    frames = []
    for scene in scenes:
        start_ev = scene.optimal_ev + rng.uniform(-1.5, 1.5)
        frames.append((scene, render(scene, start_ev)))

    gts = {}
    for eid in expert_ids:
        oracle = experts[eid]
        gts[eid] = [datamod.oracle_delta_ev(frame, oracle,
                                            weights=scene.importance_mask)
                    for scene, frame in frames]

    predictions = {}
    for model_path in args.model:
        params, config = net.load_params(model_path)
        mid = os.path.splitext(os.path.basename(model_path))[0]
        images = np.stack([f.data.transpose(2, 0, 1) for _, f in frames])
        predictions[mid] = list(net.predict_delta_ev_batch(params, images, config))

    lines = []
    if args.cross or args.nearest:
        if args.cross:
            matrix, rows, cols = sim.cross_eval(predictions, gts)
            lines.append("cross_mae\t" + "\t".join(cols))
            for i, rid in enumerate(rows):
                lines.append(rid + "\t" + "\t".join(f"{v:.4f}" for v in matrix[i]))
        if args.nearest:
            matrix, rows, cols = sim.nearest_expert_accuracy(predictions, gts)
            lines.append("nearest_pct\t" + "\t".join(cols))
            for i, rid in enumerate(rows):
                lines.append(rid + "\t" +
                             "\t".join(f"{100 * v:.1f}" for v in matrix[i]))
    else:
        eid = expert_ids[0]
        lines.append("model\tmae")
        for mid, preds in predictions.items():
            lines.append(f"{mid}\t{sim.mae(preds, gts[eid]):.4f}")
    out = "\n".join(lines)
    print(out)
    if args.out:
        _atomic_write_text(args.out, out + "\n")
    return 0


def cmd_simulate(args):
    scenes = load_scene_set(args.scenes)
    params, config = net.load_params(args.model)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    summary = ["episode\tsteps_to_converge\tconverged\tovershoot_ev"
               "\toscillations\tresidual_ev"]
    n_ok = 0
    for ep in range(args.episodes):
        scene = scenes[ep % len(scenes)]
        start_ev = scene.optimal_ev + rng.uniform(-1.5, 1.5)
        trace = sim.run_episode(scene, params, config, start_ev,
                                max_steps=args.max_steps,
                                latency_depth=args.latency)
        report = sim.convergence_metrics(trace, scene.optimal_ev)
        sim.write_trace(trace, os.path.join(args.out, f"trace_{ep:04d}.tsv"))
        summary.append(f"{ep}\t{report.steps_to_converge}\t{report.converged}"
                       f"\t{report.overshoot_ev:.4f}\t{report.oscillation_count}"
                       f"\t{report.residual_ev:.4f}")
        n_ok += int(report.converged)
    _atomic_write_text(os.path.join(args.out, "summary.tsv"),
                       "\n".join(summary) + "\n")
    print(f"{n_ok}/{args.episodes} episodes converged")
    return 0


def cmd_maps(args):
    params, config = net.load_params(args.model)
    image = read_png(args.image)
    if image.height != config.input_size or image.width != config.input_size:
        raise SystemExit(f"image is {image.width}x{image.height}, model "
                         f"expects {config.input_size}x{config.input_size}")
    delta, maps = net.forward(params, image, config, mode="eval")
    em_vis, im_vis = net.export_maps(maps, target_size=args.size)
    base, _ = os.path.splitext(args.out)
    write_png(em_vis, base + ".em.png")
    write_png(im_vis, base + ".im.png")
    print(f"delta_ev={delta * config.scale_ev:.4f} "
          f"wrote {base}.em.png {base}.im.png")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(args.model, args.scenes, latency_depth=args.latency,
                     seed=args.seed, event_log=args.event_log,
                     frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="aemeter",
                                description="Personalizable auto-exposure "
                                            "training and simulation")
    p.add_argument("--seed", type=int, default=default_seed())
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate a synthetic scene set")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.add_argument("--no-previews", action="store_true")
    g.set_defaults(fn=cmd_gen_scenes)

    t = sub.add_parser("pretrain", help="supervised pre-training")
    t.add_argument("--manifest", required=True,
                   help="scene set directory or scenes.jsonl")
    t.add_argument("--config", choices=["desk", "paper_scale"], default="desk")
    t.add_argument("--uniform-im", action="store_true")
    t.add_argument("--epochs", type=int, default=35)
    t.add_argument("--out-model", required=True)
    t.set_defaults(fn=cmd_pretrain)

    r = sub.add_parser("rl-train", help="policy-gradient fine-tuning with an "
                                        "oracle-labeled pool")
    r.add_argument("--model", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--expert", default="expert_c")
    r.add_argument("--bias", type=float, default=0.0)
    r.add_argument("--epochs", type=int, default=10)
    r.add_argument("--out-model", required=True)
    r.set_defaults(fn=cmd_rl_train)

    e = sub.add_parser("eval", help="metric tables")
    e.add_argument("--model", action="append", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--experts", default="")
    e.add_argument("--cross", action="store_true")
    e.add_argument("--nearest", action="store_true")
    e.add_argument("--out", default="")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("simulate", help="viewfinder episodes")
    s.add_argument("--model", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--latency", type=int, default=3)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--max-steps", type=int, default=30)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    m = sub.add_parser("maps", help="EM/IM visualizations for an image")
    m.add_argument("--model", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--size", type=int, default=256)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_maps)

    v = sub.add_parser("serve", help="feedback service")
    v.add_argument("--model", required=True)
    v.add_argument("--scenes", required=True)
    v.add_argument("--latency", type=int, default=3)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--event-log", default="")
    v.add_argument("--frontend", default="")
    v.set_defaults(fn=cmd_serve)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
