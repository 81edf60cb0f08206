"""One complete oblivious classification: features, score, label.

Ties the engine, feature pipelines and classifiers into the session
program every party runs identically. Rounds and wall-clock are
accounted per phase so timing reports can split feature extraction
from inference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import classifiers, features
from .engine import MpcEngine

PHASE_FE = "fe"
PHASE_IN = "inference"
PHASE_OPEN = "open"


@dataclass(frozen=True)
class ScheduleResult:
    labels: np.ndarray  # one 0/1 label per window
    fe_rounds: int
    in_rounds: int
    open_rounds: int
    fe_ms: float
    in_ms: float

    @property
    def total_rounds(self):
        return self.fe_rounds + self.in_rounds + self.open_rounds


def run_schedule(eng: MpcEngine, window_handle, window_len,
                 model: classifiers.ModelParams,
                 shared_weights=False) -> ScheduleResult:
    """Run feature extraction + inference + label opening on shared windows.

    window_handle holds whole windows of window_len tri-axial samples;
    any number of windows may be batched, the schedule (and round count)
    does not change.
    """
    t0 = time.perf_counter()
    with eng.phase(PHASE_FE):
        fv = features.extract(eng, window_handle, model.feature_kind,
                              window_len=window_len)
    t1 = time.perf_counter()
    with eng.phase(PHASE_IN):
        bit = classifiers.infer(eng, fv, model, shared_weights=shared_weights)
    t2 = time.perf_counter()
    eng.mark_output(bit)
    with eng.phase(PHASE_OPEN):
        opened = eng.open_output(bit)
    by_phase = eng.counter.by_phase
    return ScheduleResult(
        labels=np.asarray(opened, dtype=np.int64),
        fe_rounds=by_phase.get(PHASE_FE, 0),
        in_rounds=by_phase.get(PHASE_IN, 0),
        open_rounds=by_phase.get(PHASE_OPEN, 0),
        fe_ms=(t1 - t0) * 1e3,
        in_ms=(t2 - t1) * 1e3,
    )


def schedule_rounds(model_kind, feature_kind, window_len=features.DEFAULT_WINDOW,
                    shared_weights=False):
    """Static total for the full schedule including the label opening."""
    return (features.feature_rounds(feature_kind, window_len)
            + classifiers.inference_rounds(model_kind, shared_weights) + 1)
