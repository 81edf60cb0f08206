"""Binary fall classifiers over shared feature vectors.

Three models share one decision shape: evaluate a score obliviously,
then reveal only the sign. Logistic regression and the linear SVM are a
single weighted sum (the logistic squashing is monotone, so the label
is the sign of the raw score). Gaussian naive Bayes compares the two
class log-posteriors.

Model parameters are public. That makes the linear score a purely local
weighted sum; only the fixed-point rescale and the sign comparison cost
rounds. A shared-weights mode is available for the linear models, where
one party enters the weight vector as a secret and the dot product runs
as a real secure multiplication.

For naive Bayes the per-feature deviations are folded against the
public factor 1/(sigma*sqrt(2)) before squaring, so the squared terms
are exactly the Mahalanobis summands and intermediate magnitudes stay
inside the truncation bounds for any input within the documented
z-range (|x - mu| / sigma up to roughly 2^7.5).

Scores at or above zero map to label 1 (fall): when in doubt, alarm.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .engine import MpcEngine
from .errors import ConfigError, MalformedInputError, ModelLoadError
from .features import (
    DERIVATIVE,
    KINDS,
    SMARTFALL,
    SharedFeatureVector,
    compare_rounds,
    trunc_rounds,
)

LR = "lr"
SVM = "svm"
NB = "nb"
MODEL_KINDS = (LR, SVM, NB)
LINEAR_KINDS = (LR, SVM)

_FIELDS = ("kind", "feature_kind", "dimension", "weights", "bias",
           "means", "variances", "log_priors", "frac_bits")

# Per-window score magnitude must clear the truncation bound with the
# default codec; model values are additionally capped to the encodable
# fixed-point range at load time.
_VALUE_LIMIT = float(1 << 20)


@dataclass(frozen=True)
class ModelParams:
    kind: str
    feature_kind: str
    dimension: int
    frac_bits: int
    weights: np.ndarray | None = None
    bias: float | None = None
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    log_priors: np.ndarray | None = None


# -- loading and export -------------------------------------------------


def _fail(path, msg):
    raise ModelLoadError(f"{path}: {msg}")


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {type(value).__name__}")
    v = float(value)
    if not math.isfinite(v):
        _fail(path, "must be finite")
    if abs(v) >= _VALUE_LIMIT:
        _fail(path, f"magnitude {v:g} outside the encodable range")
    return v


def _vector(value, path, length):
    if not isinstance(value, list):
        _fail(path, f"expected a list, got {type(value).__name__}")
    if len(value) != length:
        _fail(path, f"expected {length} entries, got {len(value)}")
    return np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(value)])

def _matrix(value, path, rows, cols):
    if not isinstance(value, list):
        _fail(path, f"expected a list, got {type(value).__name__}")
    if len(value) != rows:
        _fail(path, f"expected {rows} rows, got {len(value)}")
    return np.stack([_vector(r, f"{path}[{i}]", cols)
                     for i, r in enumerate(value)])


def _require_null(doc, name):
    if doc[name] is not None:
        _fail(name, f"must be null for kind {doc['kind']!r}")


def load_model(source) -> ModelParams:
    """Parse and validate a model document (path, JSON text, or dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        else:
            text = source
        try:
            doc = json.loads(text)
        except (TypeError, ValueError) as e:
            raise ModelLoadError(f"document: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        _fail("document", "top level must be an object")
    for name in _FIELDS:
        if name not in doc:
            _fail(name, "missing required field")
    for name in doc:
        if name not in _FIELDS:
            _fail(name, "unknown field")

    kind = doc["kind"]
    if kind not in MODEL_KINDS:
        _fail("kind", f"expected one of {'|'.join(MODEL_KINDS)}, got {kind!r}")
    feature_kind = doc["feature_kind"]
    if feature_kind not in KINDS:
        _fail("feature_kind",
              f"expected one of {'|'.join(KINDS)}, got {feature_kind!r}")
    dim = doc["dimension"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        _fail("dimension", f"expected a positive integer, got {dim!r}")
    if feature_kind == DERIVATIVE and dim != 6:
        _fail("dimension", f"derivative features have 6 entries, got {dim}")
    if feature_kind == SMARTFALL and dim < 2:
        _fail("dimension", f"magnitude features have at least 2 entries, got {dim}")
    frac = doc["frac_bits"]
    if not isinstance(frac, int) or isinstance(frac, bool) or not 1 <= frac <= 30:
        _fail("frac_bits", f"expected an integer in 1..30, got {frac!r}")

    if kind in LINEAR_KINDS:
        weights = _vector(doc["weights"], "weights", dim)
        bias = _number(doc["bias"], "bias")
        for name in ("means", "variances", "log_priors"):
            _require_null(doc, name)
        return ModelParams(kind, feature_kind, dim, frac, weights=weights,
                           bias=bias)

    means = _matrix(doc["means"], "means", 2, dim)
    variances = _matrix(doc["variances"], "variances", 2, dim)
    for i in range(2):
        for j in range(dim):
            if variances[i][j] <= 0:
                _fail(f"variances[{i}][{j}]",
                      f"must be strictly positive, got {variances[i][j]:g}")
    log_priors = _vector(doc["log_priors"], "log_priors", 2)
    for name in ("weights", "bias"):
        _require_null(doc, name)
    return ModelParams(kind, feature_kind, dim, frac, means=means,
                       variances=variances, log_priors=log_priors)


def export_model(m: ModelParams, path=None) -> dict:
    """ModelParams back to the document form; optionally written to path."""
    doc = {name: None for name in _FIELDS}
    doc.update(kind=m.kind, feature_kind=m.feature_kind,
               dimension=m.dimension, frac_bits=m.frac_bits)
    if m.kind in LINEAR_KINDS:
        doc["weights"] = [float(v) for v in m.weights]
        doc["bias"] = float(m.bias)
    else:
        doc["means"] = [[float(v) for v in row] for row in m.means]
        doc["variances"] = [[float(v) for v in row] for row in m.variances]
        doc["log_priors"] = [float(v) for v in m.log_priors]
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return doc


def bundled_model(kind, feature_kind) -> ModelParams:
    """Load one of the model files shipped with the package."""
    from importlib import resources

    name = f"{kind}_{feature_kind}.json"
    ref = resources.files(__package__) / "models" / name
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelLoadError(f"{name}: no bundled model") from None
    return load_model(text)


# -- plaintext oracles --------------------------------------------------


def oracle_margin(x, m: ModelParams):
    """Decision score per row; the label is its sign."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != m.dimension:
        raise MalformedInputError(
            f"feature vector has {rows.shape[1]} entries, model wants {m.dimension}"
        )
    if m.kind in LINEAR_KINDS:
        s = rows @ m.weights + m.bias
    else:
        u = 1.0 / np.sqrt(2.0 * m.variances)  # (2, D)
        t0 = (rows - m.means[0]) * u[0]
        t1 = (rows - m.means[1]) * u[1]
        s = (m.log_priors[1] - m.log_priors[0]
             + (t0 ** 2).sum(axis=1) - (t1 ** 2).sum(axis=1))
    return float(s[0]) if squeeze else s


def oracle_infer(x, m: ModelParams):
    s = oracle_margin(x, m)
    if np.isscalar(s):
        return int(s >= 0)
    return (s >= 0).astype(np.int64)


# -- MPC inference ------------------------------------------------------


def _check_inputs(eng, fv: SharedFeatureVector, m, kinds):
    if m.kind not in kinds:
        raise ConfigError(f"model kind {m.kind!r} not supported here")
    if m.frac_bits != eng.codec.frac_bits:
        raise ConfigError(
            f"model encoded at {m.frac_bits} fractional bits, "
            f"engine runs at {eng.codec.frac_bits}"
        )
    if m.feature_kind != fv.kind:
        raise MalformedInputError(
            f"model expects {m.feature_kind} features, got {fv.kind}"
        )
    if m.dimension != fv.dimension:
        raise MalformedInputError(
            f"feature vector has {fv.dimension} entries, model wants {m.dimension}"
        )


def _window_major_perm(fv: SharedFeatureVector):
    """Indices turning block-concatenated features into (window, feature) rows."""
    W = fv.windows
    cols = []
    off = 0
    for b in fv.blocks:
        cols.append(off + np.arange(W)[:, None] * b.width
                    + np.arange(b.width)[None, :])
        off += W * b.width
    return np.hstack(cols).ravel()


def _block_slices(fv):
    off = 0
    for b in fv.blocks:
        yield b, slice(off, off + b.width)
        off += b.width


def linear_infer(eng: MpcEngine, fv: SharedFeatureVector, m: ModelParams,
                 shared_weights=False):
    """Sign of w.x + b per window; returns the shared label bit vector.

    With public weights the weighted sum is local. Each block's weights
    are encoded at the complementary scale so every product lands at 2f
    regardless of the block's own tag; one truncation brings the score
    back to f for the sign comparison.
    """
    _check_inputs(eng, fv, m, LINEAR_KINDS)
    f = eng.codec.frac_bits
    W = fv.windows
    if shared_weights:
        return _linear_infer_shared(eng, fv, m)
    parts = []
    for b, seg in _block_slices(fv):
        q = 2 * f - b.handle.frac_bits
        raw = np.tile(eng.codec.encode_vec(m.weights[seg], q), W)
        parts.append(eng.mul_public(b.handle, raw, q))
    score = eng.permute(eng.concat(parts), _window_major_perm(fv))
    score = eng.segment_sum(score, m.dimension)
    score = eng.add_public(score, eng.codec.encode(m.bias, 2 * f))
    score = eng.trunc(score, f, mag_bits=47)
    return eng.greater_equal(score, public=0)


def _linear_infer_shared(eng, fv, m):
    """Same decision with the weight vector entered as a secret by party 1.

    Blocks are viewed at a uniform scale f; the power-of-two view factor
    is folded into the weights before sharing, which every party can do
    because block scales are public schema facts.
    """
    f = eng.codec.frac_bits
    W = fv.windows
    adj = np.concatenate([
        m.weights[seg] * 2.0 ** (f - b.handle.frac_bits)
        for b, seg in _block_slices(fv)
    ])
    raw_w = eng.codec.encode_vec(adj, f) if eng.party == 1 else None
    wh = eng.input_from(1, raw_values=raw_w, length=m.dimension, frac_bits=f)
    widx = np.concatenate([
        np.tile(np.arange(seg.start, seg.stop), W) for _, seg in _block_slices(fv)
    ])
    xs = eng.concat([eng.retag(b.handle, f) for b in fv.blocks])
    prods = eng.mul(eng.permute(wh, widx), xs)
    score = eng.permute(prods, _window_major_perm(fv))
    score = eng.segment_sum(score, m.dimension)
    score = eng.add_public(score, eng.codec.encode(m.bias, 2 * f))
    score = eng.trunc(score, f, mag_bits=47)
    return eng.greater_equal(score, public=0)


def nb_infer(eng: MpcEngine, fv: SharedFeatureVector, m: ModelParams):
    """Gaussian naive Bayes: sign of the two-class log-posterior gap.

    Both classes' deviations are batched into one vector, so the whole
    inference costs two truncations, one squaring and one comparison no
    matter how many windows or features are in flight.
    """
    _check_inputs(eng, fv, m, (NB,))
    f = eng.codec.frac_bits
    W = fv.windows
    D = m.dimension
    u = 1.0 / np.sqrt(2.0 * m.variances)  # (2, D)
    parts = []
    for ci in range(2):
        for b, seg in _block_slices(fv):
            s_b = b.handle.frac_bits
            mu_raw = np.tile(eng.codec.encode_vec(-m.means[ci][seg], s_b), W)
            diff = eng.add_public(b.handle, mu_raw)
            q = 2 * f - s_b
            u_raw = np.tile(eng.codec.encode_vec(u[ci][seg], q), W)
            parts.append(eng.mul_public(diff, u_raw, q))
    t = eng.trunc(eng.concat(parts), f)
    tsq = eng.trunc(eng.mul(t, t), f, mag_bits=47)
    base = _window_major_perm(fv)
    per_class = eng.permute(tsq, np.concatenate([base, base + W * D]))
    sums = eng.segment_sum(per_class, D)  # class 0 windows, then class 1
    gap = eng.sub(eng.slice(sums, 0, W), eng.slice(sums, W, 2 * W))
    dprior = float(m.log_priors[1] - m.log_priors[0])
    gap = eng.add_public(gap, eng.codec.encode(dprior, f))
    return eng.greater_equal(gap, public=0)


def infer(eng: MpcEngine, fv: SharedFeatureVector, m: ModelParams,
          shared_weights=False):
    if m.kind == NB:
        return nb_infer(eng, fv, m)
    return linear_infer(eng, fv, m, shared_weights=shared_weights)


def inference_rounds(kind, shared_weights=False, m_bits=36):
    """Static schedule mirror; tests pin the measured counters to this."""
    if kind in LINEAR_KINDS:
        extra = 2 if shared_weights else 0  # weight input + secure mul
        return extra + trunc_rounds() + compare_rounds(m_bits)
    if kind == NB:
        return 2 * trunc_rounds() + 1 + compare_rounds(m_bits)
    raise ConfigError(f"unknown model kind {kind!r}")
