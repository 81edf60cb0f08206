"""Feature pipelines over shared windows, plus their plaintext oracles.

A shared window batch is one engine handle holding W windows of L
tri-axial samples, interleaved x,y,z per sample and concatenated
window-major (the same layout the device uploads). Both pipelines are
batched: the communication rounds depend only on the window length,
never on the window count.

Two feature kinds:

* smartfall: the L per-sample vector magnitudes followed by the spread
  between the largest and smallest magnitude, L+1 values per window.
* derivative: per channel, the sum of first derivatives and the sum of
  squared derivatives, where the derivative is the central difference
  d[k] = 0.5 * (x[k+2] - x[k]) over the window interior (a sliding
  correlation with taps (-0.5, 0, 0.5)); 6 values per window.

The halving in the derivative kernel is never truncated away: the sums
keep the raw field value of sum(x[k] - x[k+2]) and retag the scale one
bit up, so those features are exact. The squared sums fold the 1/4 into
the single rescale after squaring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Handle, MpcEngine
from .errors import MalformedInputError

SMARTFALL = "smartfall"
DERIVATIVE = "derivative"
KINDS = (SMARTFALL, DERIVATIVE)

DERIVATIVE_KERNEL = (-0.5, 0.0, 0.5)

DEFAULT_WINDOW = 24
DEFAULT_RATE_HZ = 31.25


def feature_dimension(kind, window_len=DEFAULT_WINDOW):
    if kind == SMARTFALL:
        return window_len + 1
    if kind == DERIVATIVE:
        return 6
    raise MalformedInputError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class FeatureBlock:
    """A contiguous group of per-window features sharing one scale."""

    handle: Handle
    width: int


@dataclass(frozen=True)
class SharedFeatureVector:
    kind: str
    windows: int
    blocks: tuple

    @property
    def dimension(self):
        return sum(b.width for b in self.blocks)


def _window_count(h, window_len):
    if h.length % (3 * window_len):
        raise MalformedInputError(
            f"share vector of {h.length} elements does not hold whole "
            f"windows of {window_len} tri-axial samples"
        )
    return h.length // (3 * window_len)


def smartfall_features(eng: MpcEngine, h, window_len=DEFAULT_WINDOW):
    """Magnitudes + spread. Rounds: square, rescale, sqrt, min/max tree."""
    L = window_len
    if L < 1:
        raise MalformedInputError("window length must be positive")
    W = _window_count(h, L)
    f = eng.codec.frac_bits
    sq = eng.mul(h, h)
    ssum = eng.segment_sum(sq, 3)  # x^2+y^2+z^2 per sample
    ssum = eng.trunc(ssum, f)
    mags = eng.secure_sqrt(ssum)
    mn, mx = eng.window_min_max(mags, window_len=L)
    spread = eng.sub(mx, mn)
    flat = eng.concat([mags, spread])
    idx = np.empty((W, L + 1), dtype=np.int64)
    idx[:, :L] = np.arange(W * L).reshape(W, L)
    idx[:, L] = W * L + np.arange(W)
    feats = eng.permute(flat, idx.ravel())
    return SharedFeatureVector(SMARTFALL, W, (FeatureBlock(feats, L + 1),))


def derivative_features(eng: MpcEngine, h, window_len=DEFAULT_WINDOW):
    """Per-channel derivative sums. One mul round plus one rescale."""
    L = window_len
    if L < 3:
        raise MalformedInputError(
            f"window of {L} samples is too short for derivative features"
        )
    W = _window_count(h, L)
    f = eng.codec.frac_bits
    T = L - 2  # interior derivative samples per channel
    sample_base = (np.arange(W) * 3 * L)[:, None]
    chan = []
    for a in range(3):
        idx = sample_base + 3 * np.arange(L)[None, :] + a
        chan.append(eng.permute(h, idx.ravel()))
    win_base = (np.arange(W) * L)[:, None]
    head = (win_base + np.arange(T)[None, :]).ravel()
    tail = head + 2
    diffs = [eng.sub(eng.permute(c, tail), eng.permute(c, head)) for c in chan]
    tcat = eng.concat(diffs)  # channel-major: all x diffs, then y, then z
    # sum(t)/2 at scale f is exactly sum(t) at scale f+1; no rescale round.
    sums = eng.retag(eng.segment_sum(tcat, T), f + 1)
    sq = eng.mul(tcat, tcat)
    ssq = eng.segment_sum(sq, T)
    # Fold the kernel's 1/4 into the rescale: shift f+2 lands sum(t^2)/4
    # back at scale f.
    ssq = eng.retag(eng.trunc(ssq, f + 2, mag_bits=47), f)
    # channel-major (3, W) -> window-major (W, 3)
    perm = (np.arange(3)[None, :] * W + np.arange(W)[:, None]).ravel()
    return SharedFeatureVector(DERIVATIVE, W, (
        FeatureBlock(eng.permute(sums, perm), 3),
        FeatureBlock(eng.permute(ssq, perm), 3),
    ))


def extract(eng: MpcEngine, h, kind, window_len=DEFAULT_WINDOW):
    if kind == SMARTFALL:
        return smartfall_features(eng, h, window_len)
    if kind == DERIVATIVE:
        return derivative_features(eng, h, window_len)
    raise MalformedInputError(f"unknown feature kind {kind!r}")


# -- plaintext oracles --------------------------------------------------


def oracle_features(window, kind):
    """Floating-point reference for one (L, 3) window."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != 3:
        raise MalformedInputError(f"window must be (L, 3), got {w.shape}")
    if kind == SMARTFALL:
        mags = np.sqrt((w ** 2).sum(axis=1))
        return np.concatenate([mags, [mags.max() - mags.min()]])
    if kind == DERIVATIVE:
        if w.shape[0] < 3:
            raise MalformedInputError("window too short for derivative features")
        d = 0.5 * (w[2:] - w[:-2])  # (L-2, 3) central differences
        return np.concatenate([d.sum(axis=0), (d ** 2).sum(axis=0)])
    raise MalformedInputError(f"unknown feature kind {kind!r}")


def oracle_features_batch(windows, kind):
    """(W, L, 3) -> (W, D) oracle features."""
    return np.stack([oracle_features(w, kind) for w in np.asarray(windows)])


# -- static round accounting --------------------------------------------
# These mirror the engine schedules exactly; tests assert measured counter
# values equal these formulas so they cannot drift.


def _halving_levels(n):
    lv = 0
    while n > 1:
        n = n // 2 + (n % 2)
        lv += 1
    return lv


def compare_rounds(m_bits):
    # randomness (3) + masked open (1) + log-depth bit-compare merges
    return 4 + _halving_levels(m_bits)


def trunc_rounds():
    return 4


def sqrt_rounds(m_bits, iters):
    # threshold compare + normalize/seed rescales + Newton iterations
    return compare_rounds(m_bits) + 24 + 15 * iters


def minmax_rounds(window_len, m_bits):
    return _halving_levels(window_len) * (compare_rounds(m_bits) + 1)


def feature_rounds(kind, window_len=DEFAULT_WINDOW, m_bits=36,
                   sqrt_iters=MpcEngine._SQRT_ITERS):
    if kind == SMARTFALL:
        return (1 + trunc_rounds() + sqrt_rounds(m_bits, sqrt_iters)
                + minmax_rounds(window_len, m_bits))
    if kind == DERIVATIVE:
        return 1 + trunc_rounds()
    raise MalformedInputError(f"unknown feature kind {kind!r}")
