"""Blinded two-alternative forced-choice study service.

A StudyStore owns the image pools (patch-level: single patches; wsi-crop:
multi-level pyramids cropped per trial), hands out sessions with seeded trial
plans, records judgments to an append-only JSONL log, and computes the
per-rater / pooled statistics by replaying that log. Image references are
opaque hashes, and trial payloads never carry the ground-truth side; raters
get no correctness feedback until they consult the stats endpoint.
"""

import io
import json
import os
import threading
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import imageops
from .errors import StateError, ValidationError
from .rng import NoiseStream, stable_hash

CONDITIONS = ("patch-level", "wsi-crop")
DEFAULT_TRIALS = 20
TRIAL_CROP = 32


@dataclass
class Trial:
    trial_id: str
    magnification: int
    left_ref: str
    right_ref: str
    real_side: str  # "left" | "right"; never serialized to clients

    def payload(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "left_image_url": f"/images/{self.left_ref}",
            "right_image_url": f"/images/{self.right_ref}",
            "magnification": self.magnification,
        }


@dataclass
class Session:
    session_id: str
    rater: str
    condition: str
    trials: list
    judged: dict  # trial_id -> chosen side


def _levels(entry):
    return entry.levels if hasattr(entry, "levels") else entry


class StudyStore:
    """Pools, sessions, image registry, and the judgment log."""

    def __init__(self, pools: dict, log_path: str, server_seed: int = 0):
        for condition in pools:
            if condition not in CONDITIONS:
                raise ValidationError(f"unknown condition '{condition}'")
        self.pools = pools
        self.log_path = log_path
        self.server_seed = server_seed
        self.images: dict = {}
        self.sessions: dict = {}
        self._counter = 0
        self._lock = threading.Lock()

    # ---- registry ----

    def _register(self, img: np.ndarray) -> str:
        self._counter += 1
        ref = format(stable_hash(self.server_seed, "ref", self._counter) &
                     ((1 << 63) - 1), "016x")
        self.images[ref] = img
        return ref

    def image_png(self, ref: str) -> bytes:
        if ref not in self.images:
            raise KeyError(ref)
        buf = io.BytesIO()
        Image.fromarray(imageops.to_uint8(self.images[ref])).save(buf, "PNG")
        return buf.getvalue()

    # ---- sessions ----

    def _draw_pair(self, condition: str, stream: NoiseStream):
        pool = self.pools[condition]
        real = pool["real"][int(stream.integers(0, len(pool["real"])))]
        synth = pool["synth"][int(stream.integers(0, len(pool["synth"])))]
        if condition == "patch-level":
            return 0, real, synth
        mag = int(stream.integers(0, 3))
        crops = []
        for entry in (real, synth):
            img = _levels(entry)[mag]
            size = img.shape[1]
            crop = min(TRIAL_CROP, size)
            y = int(stream.integers(0, size - crop + 1))
            x = int(stream.integers(0, size - crop + 1))
            crops.append(img[:, y:y + crop, x:x + crop])
        return mag, crops[0], crops[1]

    def create_session(self, rater: str, condition: str, seed: int,
                       n_trials: int = DEFAULT_TRIALS) -> Session:
        if condition not in self.pools:
            raise ValidationError(f"no pools configured for condition "
                                  f"'{condition}'")
        pool = self.pools[condition]
        if not pool.get("real") or not pool.get("synth"):
            raise ValidationError(f"empty image pool for condition "
                                  f"'{condition}'")
        if not rater:
            raise ValidationError("rater id must be non-empty")
        # the trial plan depends only on (condition, seed)
        stream = NoiseStream(stable_hash("session-plan", condition, seed))
        with self._lock:
            self._counter += 1
            session_id = f"s{self._counter:06d}"
            trials = []
            for k in range(n_trials):
                mag, real_img, synth_img = self._draw_pair(condition, stream)
                real_side = "left" if stream.uniform(()) < 0.5 else "right"
                if real_side == "left":
                    left, right = real_img, synth_img
                else:
                    left, right = synth_img, real_img
                trials.append(Trial(
                    trial_id=f"{session_id}-t{k:03d}", magnification=mag,
                    left_ref=self._register(left),
                    right_ref=self._register(right),
                    real_side=real_side))
            session = Session(session_id=session_id, rater=rater,
                              condition=condition, trials=trials, judged={})
            self.sessions[session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def next_trial(self, session_id: str) -> dict:
        session = self.get_session(session_id)
        for trial in session.trials:
            if trial.trial_id not in session.judged:
                return trial.payload()
        return {"done": True, "completed": len(session.judged),
                "total": len(session.trials)}

    def submit_judgment(self, session_id: str, trial_id: str,
                        chosen: str) -> dict:
        if chosen not in ("left", "right"):
            raise ValidationError(f"chosen must be 'left' or 'right', got "
                                  f"{chosen!r}")
        session = self.get_session(session_id)
        trial = next((t for t in session.trials if t.trial_id == trial_id), None)
        if trial is None:
            raise KeyError(trial_id)
        with self._lock:
            if trial_id in session.judged:
                raise StateError(f"trial {trial_id} already judged")
            session.judged[trial_id] = chosen
            record = {
                "ts": time.time(),
                "session": session_id,
                "rater": session.rater,
                "condition": session.condition,
                "magnification": trial.magnification,
                "trial": trial_id,
                "chosen": chosen,
                "real_side": trial.real_side,
                "correct": chosen == trial.real_side,
            }
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        remaining = len(session.trials) - len(session.judged)
        # correctness is withheld here; it is only derivable from /stats
        return {"recorded": True, "trials_left": remaining}

    # ---- statistics ----

    def read_log(self) -> list:
        if not os.path.exists(self.log_path):
            return []
        records = []
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        return records

    def stats(self, condition: str | None = None) -> dict:
        records = self.read_log()
        if condition is not None:
            records = [r for r in records if r["condition"] == condition]
        return compute_stats(records)


def compute_stats(records) -> dict:
    """Table-2-shaped rows from judgment records (event-sourced replay).

    TP counts correct identifications of the real image, FP counts choices
    of the synthetic one. Per rater: p = FP/(TP+FP) and |p-0.5|. Totals:
    summed counts, pooled p = sum(FP)/sum(N), and the judgment-count-weighted
    mean of the per-rater deviations.
    """
    by_rater: dict = {}
    for rec in records:
        tp, fp = by_rater.get(rec["rater"], (0, 0))
        if rec["correct"]:
            tp += 1
        else:
            fp += 1
        by_rater[rec["rater"]] = (tp, fp)
    return stats_from_tallies(by_rater)


def stats_from_tallies(by_rater: dict) -> dict:
    rows = []
    total_tp = total_fp = 0
    weighted_dev = 0.0
    for rater in sorted(by_rater):
        tp, fp = by_rater[rater]
        n = tp + fp
        row = {"rater": rater, "tp": tp, "fp": fp, "n": n}
        if n > 0:
            row["p"] = fp / n
            row["deviation"] = abs(row["p"] - 0.5)
            weighted_dev += n * row["deviation"]
        else:
            row["p"] = None
            row["deviation"] = None
        rows.append(row)
        total_tp += tp
        total_fp += fp
    total_n = total_tp + total_fp
    totals = {
        "tp": total_tp, "fp": total_fp, "n": total_n,
        "pooled_p": (total_fp / total_n) if total_n else None,
        "weighted_deviation": (weighted_dev / total_n) if total_n else None,
    }
    return {"rows": rows, "totals": totals}


# ---- HTTP layer --------------------------------------------------------------

def create_app(store: StudyStore):
    from fastapi import FastAPI, HTTPException, Response
    from pydantic import BaseModel

    class CreateSessionBody(BaseModel):
        rater: str
        condition: str
        seed: int
        n_trials: int = DEFAULT_TRIALS

    class JudgmentBody(BaseModel):
        trial_id: str
        chosen: str

    app = FastAPI(title="perception-study")

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        try:
            session = store.create_session(body.rater, body.condition,
                                           body.seed, body.n_trials)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"session_id": session.session_id,
                "total_trials": len(session.trials)}

    @app.get("/sessions/{session_id}/next")
    def next_trial(session_id: str):
        try:
            return store.next_trial(session_id)
        except KeyError as exc:
            raise HTTPException(status_code=404,
                                detail=f"unknown session {session_id}") from exc

    @app.post("/sessions/{session_id}/judgments")
    def submit(session_id: str, body: JudgmentBody):
        try:
            return store.submit_judgment(session_id, body.trial_id, body.chosen)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except StateError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/stats")
    def stats(condition: str | None = None):
        if condition is not None and condition not in CONDITIONS:
            raise HTTPException(status_code=400,
                                detail=f"unknown condition '{condition}'")
        out = store.stats(condition)
        out["condition"] = condition or "all"
        return out

    @app.get("/images/{ref}")
    def image(ref: str):
        try:
            data = store.image_png(ref)
        except KeyError as exc:
            raise HTTPException(status_code=404,
                                detail=f"unknown image {ref}") from exc
        return Response(content=data, media_type="image/png")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    return app


def build_pools(real_pyramids: list, gen_pyramids: list) -> dict:
    """Standard pools: patch-level compares coarsest-level images; wsi-crop
    compares seeded crops across all magnifications of whole pyramids."""
    return {
        "patch-level": {
            "real": [_levels(p)[0] for p in real_pyramids],
            "synth": [_levels(p)[0] for p in gen_pyramids],
        },
        "wsi-crop": {
            "real": list(real_pyramids),
            "synth": list(gen_pyramids),
        },
    }
