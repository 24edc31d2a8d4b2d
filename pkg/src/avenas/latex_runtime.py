"""Adaptive latent extrapolation for continuous encoding.

Consecutive frames are temporally redundant: on linear stretches of the latent
trajectory the next latent code is the linear continuation of the previous T.
Each frame, a cheap early prediction of the latent code is compared against
the previous output; when the difference stays under a threshold the full
encoder inference is skipped and (z, gaze, keypoints) are extrapolated from
history instead. Extrapolated values re-enter the history, so a hard rule
caps error accumulation: after 3 consecutive extrapolated frames the next
frame always runs the encoder.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .objective import GroundTruthFrame, SurrogateDecoder
from .supernet import DiscreteEncoder
from .tensor_core import Tensor

MAX_CONSECUTIVE_SKIPS = 3


class InsufficientHistoryError(ValueError):
    """Extrapolation was asked for before T frames of history exist."""


@dataclass
class HistoryEntry:
    z: np.ndarray
    g: np.ndarray
    y: dict[str, np.ndarray]
    source: str                       # "inference" | "extrapolated"


@dataclass
class LatexState:
    """Per-stream history window, skip threshold and the consecutive-skip cap."""

    window: int = 4
    threshold: float = 0.0
    history: deque = field(default_factory=deque)
    consecutive_skips: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.threshold < 0:
            raise ValueError(f"threshold must be nonnegative, got {self.threshold}")
        self.history = deque(self.history, maxlen=self.window)

    def push(self, entry: HistoryEntry) -> None:
        self.history.append(entry)
        assert self.consecutive_skips <= MAX_CONSECUTIVE_SKIPS


def interpolate_window(z0: np.ndarray, z_last: np.ndarray, window: int) -> list[np.ndarray]:
    """Convex combinations (window-t)/window * z0 + t/window * z_last for
    t = 0..window; the endpoints are reproduced exactly."""
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    z0 = np.asarray(z0, dtype=np.float64)
    z_last = np.asarray(z_last, dtype=np.float64)
    return [((window - t) / window) * z0 + (t / window) * z_last
            for t in range(window + 1)]


def _extrapolate_one(last: np.ndarray, oldest: np.ndarray, window: int) -> np.ndarray:
    return last + (last - oldest) / (window - 1)


def extrapolate(history, window: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """Linear continuation from the last `window` outputs, componentwise on
    latent code, gaze and keypoints."""
    if len(history) < window:
        raise InsufficientHistoryError(
            f"need {window} frames of history, have {len(history)}")
    last, oldest = history[-1], history[-window]
    z = _extrapolate_one(last.z, oldest.z, window)
    g = _extrapolate_one(last.g, oldest.g, window)
    y = {k: _extrapolate_one(last.y[k], oldest.y[k], window) for k in last.y}
    return z, g, y


class OracleEncoder:
    """Encoder stand-in that reads the ground truth off the frame; isolates
    runtime mechanics from model quality in tests."""

    def full(self, frame: GroundTruthFrame):
        return frame.z.copy(), frame.g.copy(), {k: v.copy() for k, v in frame.keypoints.items()}

    def early(self, frame: GroundTruthFrame):
        return frame.z.copy()


class TrainedEncoderRuntime:
    """Adapts a trained single-architecture encoder to the per-frame interface."""

    def __init__(self, enc: DiscreteEncoder):
        self.enc = enc

    def _batch(self, frame: GroundTruthFrame):
        return {v: Tensor(frame.images[v][None]) for v in self.enc.spec.views}

    def full(self, frame: GroundTruthFrame):
        out = self.enc.forward(self._batch(frame))
        return (out.z.data[0].copy(), out.g.data[0].copy(),
                {k: v.data[0].copy() for k, v in out.keypoints.items()})

    def early(self, frame: GroundTruthFrame):
        return self.enc.forward_early(self._batch(frame)).data[0].copy()


def decide_and_step(frame: GroundTruthFrame, encoder, state: LatexState):
    """One frame of the adaptive runtime; returns ((z, g, y), state, decision).

    Full inference runs while history is warming up, when the early-predicted
    latent moved farther than the threshold from the previous output, or when
    the consecutive-skip cap is hit; otherwise the outputs are extrapolated.
    """
    run_inference = True
    if len(state.history) >= state.window \
            and state.consecutive_skips < MAX_CONSECUTIVE_SKIPS:
        z_early = encoder.early(frame)
        dist = float(np.linalg.norm(z_early - state.history[-1].z))
        run_inference = dist > state.threshold
    if run_inference:
        z, g, y = encoder.full(frame)
        state.consecutive_skips = 0
        decision = "inference"
    else:
        z, g, y = extrapolate(state.history, state.window)
        state.consecutive_skips += 1
        decision = "extrapolated"
    state.push(HistoryEntry(z=z, g=g, y=y, source=decision))
    return (z, g, y), state, decision


def simulate_stream(frames, encoder, thresholds, decoder: SurrogateDecoder,
                    window: int = 4, full_cost_mflops: float | None = None,
                    early_cost_mflops: float | None = None) -> list[dict]:
    """Replay a sequence once per threshold; per-frame error is the rendered
    MSE against the frame's stored ground-truth rendering."""
    frames = list(frames)
    reports = []
    for thr in thresholds:
        state = LatexState(window=window, threshold=float(thr))
        decisions = []
        mse_trace = []
        for frame in frames:
            (z, g, _), state, decision = decide_and_step(frame, encoder, state)
            geo = decoder.geometry(z)
            tex = decoder.texture(z, g)
            rendered = decoder.render(geo, tex)
            mse_trace.append(float(np.mean((rendered - frame.rendered) ** 2)))
            decisions.append(decision)
        skips = sum(d == "extrapolated" for d in decisions)
        steady = decisions[window:]
        row = {
            "threshold": float(thr),
            "skip_ratio": skips / len(frames),
            "steady_state_skip_ratio": (sum(d == "extrapolated" for d in steady)
                                        / len(steady)) if steady else 0.0,
            "mean_mse": float(np.mean(mse_trace)),
            "decisions": decisions,
            "mse_trace": mse_trace,
        }
        if full_cost_mflops is not None and early_cost_mflops is not None:
            sr = row["skip_ratio"]
            row["avg_cost_mflops"] = (1.0 - sr) * full_cost_mflops \
                + sr * early_cost_mflops
        reports.append(row)
    return reports
