"""Viewfinder MDP loop with firmware latency, plus the evaluation metrics:
MAE, convergence/oscillation statistics, cross-expert matrices, nearest-expert
accuracy, Kendall's W and the data-size trend harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import LatencyQueue, render
from .network import predict_delta_ev

CONVERGE_EPS = 0.05
CONVERGE_K = 3


@dataclass
class SimStep:
    step: int
    commanded_ev: float
    effective_ev: float
    predicted_delta_ev: float
    frame_mean_luminance: float


@dataclass
class SimTrace:
    steps: list = field(default_factory=list)
    converged_at: int | None = None
    latency_depth: int = 0


@dataclass
class ConvergenceReport:
    steps_to_converge: int
    overshoot_ev: float
    oscillation_count: int
    residual_ev: float
    converged: bool = True


def run_episode(scene, params, config, start_ev, max_steps=30,
                latency_depth=0, eps=CONVERGE_EPS, k=CONVERGE_K,
                policy_fn=None):
    """Run one viewfinder episode.

    Each step: the latency queue releases the EV that was commanded `depth`
    steps ago, the frame is rendered there, the model predicts an adjustment
    and the next command targets effective_ev + prediction. `policy_fn`, when
    given, replaces the network (signature scene_frame_image -> delta EV).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    queue = LatencyQueue(latency_depth, start_ev)
    commanded = float(start_ev)
    trace = SimTrace(latency_depth=latency_depth)
    run = 0
    for step in range(1, max_steps + 1):
        effective = queue.step(commanded)
        frame = render(scene, effective)
        if policy_fn is not None:
            pred = float(policy_fn(frame))
        else:
            pred = predict_delta_ev(params, frame, config)
        commanded = effective + pred
        trace.steps.append(SimStep(
            step=step,
            commanded_ev=commanded,
            effective_ev=effective,
            predicted_delta_ev=pred,
            frame_mean_luminance=float(frame.data.mean()),
        ))
        if abs(pred) < eps:
            run += 1
            if run >= k and trace.converged_at is None:
                trace.converged_at = max(1, step - k)
        else:
            run = 0
    return trace


def convergence_metrics(trace, oracle_ev, eps=CONVERGE_EPS, k=CONVERGE_K):
    preds = [s.predicted_delta_ev for s in trace.steps]
    evs = [s.commanded_ev for s in trace.steps]
    n = len(preds)
    if n == 0:
        raise ValueError("empty trace")

    converged_at = None
    run = 0
    for i, p in enumerate(preds):
        if abs(p) < eps:
            run += 1
            if run >= k:
                converged_at = max(1, i + 1 - k)
                break
        else:
            run = 0
    converged = converged_at is not None
    steps_to_converge = converged_at if converged else n

    final_ev = evs[-1]
    overshoot = 0.0
    start_side = np.sign(evs[0] - final_ev)
    crossed = start_side == 0
    for ev in evs:
        side = np.sign(ev - final_ev)
        if not crossed and side != 0 and side != start_side:
            crossed = True
        if crossed:
            overshoot = max(overshoot, abs(ev - final_ev))

    oscillations = 0
    tail = preds[steps_to_converge:] if converged else []
    signs = [np.sign(p) for p in tail if p != 0]
    for a, b in zip(signs, signs[1:]):
        if a != b:
            oscillations += 1

    return ConvergenceReport(
        steps_to_converge=steps_to_converge,
        overshoot_ev=overshoot,
        oscillation_count=oscillations,
        residual_ev=abs(final_ev - oracle_ev),
        converged=converged,
    )


def post_convergence_amplitude(trace, eps=CONVERGE_EPS, k=CONVERGE_K):
    """Max |effective EV - final EV| after the convergence point."""
    if trace.converged_at is None:
        return float("inf")
    evs = [s.effective_ev for s in trace.steps]
    start = trace.converged_at + trace.latency_depth
    tail = evs[start:] or evs[-1:]
    final = evs[-1]
    return max(abs(ev - final) for ev in tail)


# ---------------------------------------------------------------------------
# scalar metrics

def mae(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"mae: need equal nonempty lists, got "
                         f"{preds.shape} vs {labels.shape}")
    return float(np.abs(preds - labels).mean())


def cross_eval(predictions, testsets):
    """MAE matrix: predictions[train_id] scored against testsets[test_id].

    `predictions`: map expert_id -> list of predicted EV (aligned across ids);
    `testsets`: map expert_id -> list of ground-truth EV on the same images.
    Returns (matrix, train_ids, test_ids) with rows ordered by train id.
    """
    train_ids = sorted(predictions)
    test_ids = sorted(testsets)
    for tid in test_ids:
        if len(testsets[tid]) == 0:
            raise ValueError(f"empty testset for {tid!r}")
    matrix = np.zeros((len(train_ids), len(test_ids)))
    for i, mid in enumerate(train_ids):
        for j, tid in enumerate(test_ids):
            matrix[i, j] = mae(predictions[mid], testsets[tid])
    return matrix, train_ids, test_ids


def nearest_expert_accuracy(predictions, gts):
    """Fraction of images on which model m's prediction is nearest to
    expert e's ground truth; ties split equally. Rows sum to 1."""
    model_ids = sorted(predictions)
    expert_ids = sorted(gts)
    n = len(next(iter(gts.values())))
    matrix = np.zeros((len(model_ids), len(expert_ids)))
    for i, mid in enumerate(model_ids):
        preds = np.asarray(predictions[mid], dtype=np.float64)
        dists = np.stack([np.abs(preds - np.asarray(gts[eid]))
                          for eid in expert_ids])       # (E, n)
        mins = dists.min(axis=0)
        for img in range(n):
            winners = np.nonzero(dists[:, img] == mins[img])[0]
            for wi in winners:
                matrix[i, wi] += 1.0 / len(winners)
    return matrix / n, model_ids, expert_ids


# ---------------------------------------------------------------------------
# Kendall's coefficient of concordance

def _rank_with_ties(scores):
    """Mid-rank (average) ranks, 1-based."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def kendalls_w(ratings):
    """W = 12*S / (m^2 (n^3 - n) - m * sum_T) over an (m raters x n items)
    score matrix; scores are converted to within-rater mid-ranks."""
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.ndim != 2 or ratings.shape[0] < 2 or ratings.shape[1] < 2:
        raise ValueError(f"need at least 2 raters and 2 items, got {ratings.shape}")
    m, n = ratings.shape
    ranks = np.stack([_rank_with_ties(row) for row in ratings])
    rank_sums = ranks.sum(axis=0)
    s = float(((rank_sums - rank_sums.mean()) ** 2).sum())
    tie_correction = 0.0
    for row in ranks:
        _, counts = np.unique(row, return_counts=True)
        tie_correction += float((counts ** 3 - counts).sum())
    denom = m * m * (n ** 3 - n) - m * tie_correction
    if denom <= 0:
        return 0.0
    return 12.0 * s / denom


def mean_kendalls_w(rating_matrices):
    """Average of per-matrix W values (one matrix per judged item group)."""
    ws = [kendalls_w(mat) for mat in rating_matrices]
    return float(np.mean(ws))


# ---------------------------------------------------------------------------
# data-size trend

def datasize_curve(training_pool, sizes, seeds, run_fn):
    """For each pool size, subsample and run `run_fn(subpool, seed) -> MAE`;
    report the median over seeds. Returns list of (size, median_mae)."""
    if list(sizes) != sorted(sizes) or any(s < 1 or s > len(training_pool)
                                           for s in sizes):
        raise ValueError("sizes must be ascending and within the pool")
    rows = []
    for size in sizes:
        maes = []
        for seed in seeds:
            rng = np.random.default_rng((seed, size))
            idx = rng.choice(len(training_pool), size=size, replace=False)
            sub = [training_pool[i] for i in idx]
            maes.append(run_fn(sub, seed))
        rows.append((size, float(np.median(maes))))
    return rows


def write_trace(trace, path):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("step\tcommanded_ev\teffective_ev\tpredicted_delta_ev"
                "\tframe_mean_luminance\n")
        for s in trace.steps:
            f.write(f"{s.step}\t{s.commanded_ev:.6f}\t{s.effective_ev:.6f}"
                    f"\t{s.predicted_delta_ev:.6f}\t{s.frame_mean_luminance:.6f}\n")
    os.replace(tmp, path)
