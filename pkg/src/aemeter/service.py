"""HTTP feedback service powering the human-in-the-loop personalization
session: serves simulated viewfinder frames, collects three-way labels,
runs policy-gradient fine-tunes on the pool and exposes session metrics.

Every state-changing event is appended to a JSONL event log; replaying the
log against the same starting model and scene set reproduces the fine-tuned
model bit-exactly (all rendering and training is seed-deterministic).
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from . import data as datamod
from . import network as net
from . import reinforce as rl
from .camera import ImagePlane, LatencyQueue, render, to_uint8

VALID_LABELS = ("under", "well", "over")


def _png_bytes(img):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class FrameInfo:
    frame_id: int
    scene_id: int
    effective_ev: float
    predicted_delta_ev: float
    image: ImagePlane


@dataclass
class FeedbackEvent:
    frame_id: int
    scene_id: int
    effective_ev: float
    label: str
    timestamp: float
    session_id: str


@dataclass
class EpisodeState:
    queue: LatencyQueue
    commanded_ev: float
    recent_preds: list = field(default_factory=list)


class Session:
    """Holds the model snapshot, per-scene episodes and the feedback pool."""

    def __init__(self, params, config, scenes, latency_depth=3, seed=0,
                 event_log_path=""):
        self.params = params
        self.config = config
        self.scenes = scenes
        self.latency_depth = latency_depth
        self.seed = seed
        self.session_id = f"session-{seed}"
        self.pool = []            # FeedbackEvent, append-only
        self.frames = {}          # frame_id -> FrameInfo
        self.finetune_count = 0
        self.last_finetune = None
        self.episodes = {}
        self._frame_counter = 0
        self._lock = threading.Lock()
        self._finetune_running = False
        self.event_log_path = event_log_path
        self._start_rng = np.random.default_rng(seed)

    def _episode(self, scene_id):
        if scene_id not in self.episodes:
            scene = self.scenes[scene_id]
            start = scene.optimal_ev + float(self._start_rng.uniform(-1.5, 1.5))
            self.episodes[scene_id] = EpisodeState(
                queue=LatencyQueue(self.latency_depth, start),
                commanded_ev=start,
            )
        return self.episodes[scene_id]

    def step_frame(self, scene_id):
        if not 0 <= scene_id < len(self.scenes):
            raise KeyError(f"unknown scene {scene_id}")
        with self._lock:
            ep = self._episode(scene_id)
            scene = self.scenes[scene_id]
            effective = ep.queue.step(ep.commanded_ev)
            frame = render(scene, effective)
            pred = net.predict_delta_ev(self.params, frame, self.config)
            ep.commanded_ev = effective + pred
            ep.recent_preds = (ep.recent_preds + [pred])[-20:]
            self._frame_counter += 1
            info = FrameInfo(self._frame_counter, scene_id, effective, pred, frame)
            self.frames[info.frame_id] = info
            return info

    def add_feedback(self, frame_id, label):
        if label not in VALID_LABELS:
            raise ValueError(f"label must be one of {VALID_LABELS}, got {label!r}")
        with self._lock:
            info = self.frames.get(frame_id)
            if info is None:
                raise KeyError(f"unknown frame {frame_id}")
            event = FeedbackEvent(frame_id=frame_id, scene_id=info.scene_id,
                                  effective_ev=info.effective_ev, label=label,
                                  timestamp=time.time(),
                                  session_id=self.session_id)
            self.pool.append(event)
            self._log({"type": "feedback", "scene_id": info.scene_id,
                       "effective_ev": info.effective_ev, "label": label,
                       "frame_id": frame_id})
            return len(self.pool)

    def run_finetune(self, epochs=None):
        with self._lock:
            if self._finetune_running:
                raise RuntimeError("a fine-tune is already running")
            if not self.pool:
                raise ValueError("feedback pool is empty")
            self._finetune_running = True
            pool = [(self.frames[e.frame_id].image
                     if e.frame_id in self.frames
                     else render(self.scenes[e.scene_id], e.effective_ev),
                     e.label) for e in self.pool]
            spec = rl.FinetuneSpec(epochs=epochs or 5,
                                   seed=self.seed * 100_003 + self.finetune_count)
        try:
            params, history = rl.finetune(self.params.copy(), pool,
                                          self.config, spec)
            with self._lock:
                # snapshot swap between episodes: restart all episodes
                self.params = params
                self.episodes = {}
                self.finetune_count += 1
                self.last_finetune = history
                self._log({"type": "finetune", "epochs": spec.epochs,
                           "seed": spec.seed})
            return history
        finally:
            self._finetune_running = False

    def metrics(self):
        with self._lock:
            mean_reward = float("nan")
            clamp_rate = float("nan")
            if self.last_finetune:
                mean_reward = self.last_finetune[-1].mean_reward
                clamp_rate = self.last_finetune[-1].clamp_rate
            per_scene = {str(sid): ep.recent_preds[-5:]
                         for sid, ep in self.episodes.items()}
            return {
                "pool_size": len(self.pool),
                "finetune_count": self.finetune_count,
                "mean_recent_reward": mean_reward,
                "clamp_rate": clamp_rate,
                "per_scene_recent_predictions": per_scene,
            }

    def _log(self, entry):
        if not self.event_log_path:
            return
        with open(self.event_log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def replay_event_log(params, config, scenes, log_path):
    """Re-run the finetunes recorded in an event log; with identical seeds
    the resulting parameters are bit-identical to the live session's."""
    pool = []
    for line in open(log_path, "r", encoding="utf-8"):
        line = line.strip()
        if not line:
            continue
        entry = json.loads(line)
        if entry["type"] == "feedback":
            frame = render(scenes[entry["scene_id"]], entry["effective_ev"])
            pool.append((frame, entry["label"]))
        elif entry["type"] == "finetune":
            spec = rl.FinetuneSpec(epochs=entry["epochs"], seed=entry["seed"])
            params, _ = rl.finetune(params.copy(), list(pool), config, spec)
    return params


# ---------------------------------------------------------------------------
# HTTP layer

class FeedbackBody(BaseModel):
    frame_id: int
    label: str


class FinetuneBody(BaseModel):
    epochs: int | None = None


def create_app(model_path, scenes_path, latency_depth=3, seed=0,
               event_log="", frontend_dir="", session=None):
    if session is None:
        from .cli import load_scene_set

        params, config = net.load_params(model_path)
        scenes = load_scene_set(scenes_path)
        session = Session(params, config, scenes, latency_depth=latency_depth,
                          seed=seed, event_log_path=event_log)

    app = FastAPI(title="aemeter feedback service")
    app.state.session = session

    @app.get("/frame")
    def get_frame(scene_id: int = 0):
        try:
            info = session.step_frame(scene_id)
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        return {
            "frame_id": info.frame_id,
            "scene_id": info.scene_id,
            "effective_ev": info.effective_ev,
            "predicted_delta_ev": info.predicted_delta_ev,
            "image_url": f"/frame/{info.frame_id}/image",
        }

    @app.get("/frame/{frame_id}/image")
    def get_frame_image(frame_id: int):
        info = session.frames.get(frame_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"unknown frame {frame_id}")
        return Response(content=_png_bytes(info.image), media_type="image/png")

    @app.post("/feedback")
    def post_feedback(body: FeedbackBody):
        try:
            size = session.add_feedback(body.frame_id, body.label)
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return {"pool_size": size}

    @app.post("/finetune")
    def post_finetune(body: FinetuneBody):
        try:
            history = session.run_finetune(epochs=body.epochs)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except RuntimeError as e:
            raise HTTPException(status_code=409, detail=str(e))
        last = history[-1]
        return {
            "finetune_count": session.finetune_count,
            "epochs": len(history),
            "mean_reward": last.mean_reward,
            "n_samples": last.n_samples,
            "n_excluded": last.n_excluded,
            "clamp_rate": last.clamp_rate,
        }

    @app.get("/maps/{frame_id}")
    def get_maps(frame_id: int):
        info = session.frames.get(frame_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"unknown frame {frame_id}")
        _, maps = net.forward(session.params, info.image, session.config,
                              mode="eval")
        em_vis, im_vis = net.export_maps(maps, target_size=info.image.height)
        return {
            "frame_id": frame_id,
            "em_png_base64": base64.b64encode(_png_bytes(em_vis)).decode(),
            "im_png_base64": base64.b64encode(_png_bytes(im_vis)).decode(),
        }

    @app.get("/metrics")
    def get_metrics():
        return session.metrics()

    @app.get("/model/info")
    def model_info():
        return {
            "config": session.config.to_dict(),
            "finetune_count": session.finetune_count,
            "n_scenes": len(session.scenes),
            "latency_depth": session.latency_depth,
        }

    if frontend_dir and os.path.isdir(frontend_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=frontend_dir, html=True),
                  name="console")

    return app
