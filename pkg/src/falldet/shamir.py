"""Polynomial secret sharing and Lagrange reconstruction.

A secret s is embedded as f(0) of a random degree-d polynomial over the
field; party i holds f(i) for evaluation points 1..n.  The sharing policy
fixes (n, d) and requires 2d+1 <= n so degree-2d products can still be
recombined by the multiplication protocol.  Default policy: n=3, d=1,
reconstruct_count 2.

Coefficients are drawn from the entropy source passed by the caller;
tests may instead pin them via the ``coefficients`` hook to freeze known
share vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientSharesError, MalformedInputError
from .field import PrimeField


@dataclass(frozen=True)
class SharingPolicy:
    n: int = 3
    degree: int = 1

    def __post_init__(self):
        if self.degree < 1:
            raise ConfigError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.n < 2 * self.degree + 1:
            raise ConfigError(
                f"policy needs n >= 2d+1 for products: n={self.n}, d={self.degree}"
            )

    @property
    def reconstruct_count(self) -> int:
        return self.degree + 1


@dataclass(frozen=True)
class Share:
    """One party's point on the sharing polynomial."""
    index: int     # evaluation point, 1..n
    value: int     # canonical field element


def lagrange_weights(indices, field: PrimeField, at: int = 0) -> list[int]:
    """Interpolation weights w_i with f(at) = sum_i w_i * f(indices[i])."""
    idx = list(indices)
    if len(set(idx)) != len(idx):
        raise MalformedInputError(f"duplicate evaluation points in {idx}")
    weights = []
    for i in idx:
        num, den = 1, 1
        for j in idx:
            if j == i:
                continue
            num = num * (at - j) % field.p
            den = den * (i - j) % field.p
        weights.append(num * field.inv(den) % field.p)
    return weights


def share(secret: int, policy: SharingPolicy, field: PrimeField,
          rng: np.random.Generator | None = None,
          coefficients: list[int] | None = None) -> list[Share]:
    """Share one secret; returns shares for parties 1..n."""
    cols = share_vec(np.asarray([secret % field.p], dtype=np.uint64),
                     policy, field, rng=rng,
                     coefficients=None if coefficients is None
                     else [[c] for c in coefficients])
    return [Share(i + 1, int(cols[i][0])) for i in range(policy.n)]


def share_vec(secrets: np.ndarray, policy: SharingPolicy, field: PrimeField,
              rng: np.random.Generator | None = None,
              coefficients=None) -> np.ndarray:
    """Share a vector of secrets; returns an (n, L) array, row i-1 -> party i.

    ``coefficients`` is a test hook: degree lists of per-element coefficient
    arrays.  Production callers leave it None and coefficients come from the
    entropy source.
    """
    secrets = np.asarray(secrets, dtype=np.uint64)
    L = len(secrets)
    if coefficients is None:
        coeffs = [field.sample(L, rng) for _ in range(policy.degree)]
    else:
        if len(coefficients) != policy.degree:
            raise MalformedInputError(
                f"expected {policy.degree} coefficient rows, got {len(coefficients)}"
            )
        coeffs = [field.arr(row) for row in coefficients]
        for row in coeffs:
            if len(row) != L:
                raise MalformedInputError("coefficient row length mismatch")
    out = np.empty((policy.n, L), dtype=np.uint64)
    for i in range(1, policy.n + 1):
        acc = secrets.copy()
        x = 1
        for c in coeffs:
            x = x * i % field.p
            acc = field.vadd(acc, field.vscale(x, c))
        out[i - 1] = acc
    return out


def reconstruct(shares, policy: SharingPolicy, field: PrimeField) -> int:
    """Interpolate f(0) from at least reconstruct_count distinct shares."""
    pts = {}
    for s in shares:
        if not (1 <= s.index <= policy.n):
            raise MalformedInputError(f"share index {s.index} outside 1..{policy.n}")
        if s.index in pts and pts[s.index] != s.value % field.p:
            raise MalformedInputError(f"conflicting shares for party {s.index}")
        pts[s.index] = s.value % field.p
    if len(pts) < policy.reconstruct_count:
        raise InsufficientSharesError(
            f"need {policy.reconstruct_count} distinct shares, got {len(pts)}"
        )
    idx = sorted(pts)[:policy.reconstruct_count]
    ws = lagrange_weights(idx, field)
    return sum(w * pts[i] for w, i in zip(ws, idx)) % field.p


def reconstruct_vec(rows, policy: SharingPolicy, field: PrimeField) -> np.ndarray:
    """rows: list of (party_index, uint64 array); vectorized reconstruct."""
    seen = {}
    for idx, arr in rows:
        if not (1 <= idx <= policy.n):
            raise MalformedInputError(f"share index {idx} outside 1..{policy.n}")
        seen[idx] = arr
    if len(seen) < policy.reconstruct_count:
        raise InsufficientSharesError(
            f"need {policy.reconstruct_count} distinct share rows, got {len(seen)}"
        )
    idx = sorted(seen)[:policy.reconstruct_count]
    ws = lagrange_weights(idx, field)
    return field.vlincomb(ws, [seen[i] for i in idx])
