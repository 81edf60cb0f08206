"""Prime-field arithmetic and the fixed-point codec.

All protocol values are integers modulo a public prime ``p``.  Scalars are
plain Python ints in ``[0, p)``.  Bulk protocol data moves as numpy
``uint64`` arrays so per-element cost stays in C; two backends cover the
supported moduli:

* any prime below 2**31 - products of two canonical values fit in uint64;
* the Mersenne prime 2**61 - 1 - products are computed with a 31/30-bit
  limb split and reduced with shifts (2**61 == 1 mod p).

The modulus is configuration, not a constant, so small-field exhaustive
tests (p = 97) exercise exactly the same code paths as the default field.

Fixed-point encoding maps a real x to round(x * 2**frac_bits) mod p with
negatives in the upper half of the field.  Rounding is half away from
zero.  The codec validates that one raw product plus statistical masking
never wraps: 2*frac_bits + mul_headroom_bits + kappa + 2 <= bitlen(p).
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, MalformedInputError

MERSENNE61 = (1 << 61) - 1

_MASK31 = (1 << 31) - 1
_MASK30 = (1 << 30) - 1

# Deterministic Miller-Rabin witnesses for any n < 3.3e24.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for w in _MR_WITNESSES:
        if n % w == 0:
            return n == w
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for w in _MR_WITNESSES:
        x = pow(w, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


class PrimeField:
    """Arithmetic mod a fixed prime, with vectorized uint64 kernels."""

    def __init__(self, p: int):
        if not _is_prime(p):
            raise ConfigError(f"modulus {p} is not prime")
        if p >= (1 << 31) and p != MERSENNE61:
            raise ConfigError(
                "unsupported modulus: need p < 2**31 or p == 2**61 - 1, got bit length "
                f"{p.bit_length()}"
            )
        self.p = p
        self.bits = p.bit_length()
        self._mersenne = p == MERSENNE61

    # -- scalar ops -------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return (a + b) % self.p

    def sub(self, a: int, b: int) -> int:
        return (a - b) % self.p

    def mul(self, a: int, b: int) -> int:
        return a * b % self.p

    def neg(self, a: int) -> int:
        return -a % self.p

    def inv(self, a: int) -> int:
        if a % self.p == 0:
            raise ZeroDivisionError("inverse of zero in prime field")
        return pow(a, -1, self.p)

    def sqrt(self, a: int) -> int:
        """Tonelli-Shanks square root; raises if a is a non-residue."""
        p = self.p
        a %= p
        if a == 0:
            return 0
        if pow(a, (p - 1) // 2, p) != 1:
            raise MalformedInputError(f"{a} is not a quadratic residue mod {p}")
        if p % 4 == 3:
            return pow(a, (p + 1) // 4, p)
        # Factor p-1 = q * 2^s with q odd, walk the 2-Sylow subgroup.
        q, s = p - 1, 0
        while q % 2 == 0:
            q //= 2
            s += 1
        z = 2
        while pow(z, (p - 1) // 2, p) != p - 1:
            z += 1
        m, c, t, r = s, pow(z, q, p), pow(a, q, p), pow(a, (q + 1) // 2, p)
        while t != 1:
            i, t2 = 0, t
            while t2 != 1:
                t2 = t2 * t2 % p
                i += 1
            b = pow(c, 1 << (m - i - 1), p)
            m, c = i, b * b % p
            t, r = t * c % p, r * b % p
        return r

    # -- vector ops (numpy uint64, canonical values < p) ------------------

    def arr(self, values) -> np.ndarray:
        """Build a canonical uint64 array from ints (reduces mod p)."""
        if isinstance(values, np.ndarray) and values.dtype == np.uint64:
            if values.size == 0 or int(values.max()) < self.p:
                return values.copy()
        out = np.asarray([int(v) % self.p for v in values], dtype=np.uint64)
        return out

    def vadd(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        s = a + b  # < 2^62, no overflow
        return np.where(s >= self.p, s - np.uint64(self.p), s)

    def vsub(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.where(a >= b, a - b, a + np.uint64(self.p) - b)

    def vneg(self, a: np.ndarray) -> np.ndarray:
        return np.where(a == 0, a, np.uint64(self.p) - a)

    def vmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if not self._mersenne:
            return a * b % np.uint64(self.p)
        p64 = np.uint64(self.p)
        a0 = a & np.uint64(_MASK31)
        a1 = a >> np.uint64(31)
        b0 = b & np.uint64(_MASK31)
        b1 = b >> np.uint64(31)
        hi = a1 * b1                      # < 2^60
        mid = a1 * b0 + a0 * b1           # < 2^62
        lo = a0 * b0                      # < 2^62
        # a*b = hi*2^62 + mid*2^31 + lo; 2^61 == 1 (mod p) so 2^62 == 2.
        acc = (hi << np.uint64(1)) + (mid >> np.uint64(30)) \
            + ((mid & np.uint64(_MASK30)) << np.uint64(31)) + lo
        acc = (acc >> np.uint64(61)) + (acc & p64)
        acc = (acc >> np.uint64(61)) + (acc & p64)
        return np.where(acc >= p64, acc - p64, acc)

    def vscale(self, c: int, a: np.ndarray) -> np.ndarray:
        return self.vmul(np.full(a.shape, np.uint64(c % self.p)), a)

    def vsum(self, a: np.ndarray) -> int:
        # Python-int accumulation; exact regardless of length.
        return int(sum(int(x) for x in a) % self.p)

    def vlincomb(self, coeffs, rows) -> np.ndarray:
        """sum_i coeffs[i] * rows[i] elementwise (Lagrange recombination)."""
        acc = self.vscale(coeffs[0], rows[0])
        for c, r in zip(coeffs[1:], rows[1:]):
            acc = self.vadd(acc, self.vscale(c, r))
        return acc

    def vpow(self, a: np.ndarray, e: int) -> np.ndarray:
        """Elementwise a**e mod p, square-and-multiply on the whole vector."""
        e = int(e)
        if e < 0:
            raise ConfigError("negative exponent")
        result = np.ones(a.shape, dtype=np.uint64)
        base = a.copy()
        while e:
            if e & 1:
                result = self.vmul(result, base)
            e >>= 1
            if e:
                base = self.vmul(base, base)
        return result

    def vinv(self, a: np.ndarray) -> np.ndarray:
        """Elementwise inverse via Fermat; zeros are rejected."""
        if a.size and int((a == 0).sum()):
            raise MalformedInputError("cannot invert zero")
        return self.vpow(a, self.p - 2)

    def vsqrt(self, a: np.ndarray) -> np.ndarray:
        """Elementwise square roots of known quadratic residues.

        For p = 3 (mod 4) this is a single vectorized exponentiation; other
        moduli fall back to per-element Tonelli-Shanks.
        """
        if self.p % 4 == 3:
            return self.vpow(a, (self.p + 1) // 4)
        return self.arr([self.sqrt(int(x)) for x in a])

    def _vpow_ones(self, a: np.ndarray, k: int) -> np.ndarray:
        """a ** (2**k - 1), by doubling the length of the ones-run.

        ~log2(k) multiplies plus k squarings, against ~2k for plain
        square-and-multiply on an all-ones exponent.
        """
        runs = {1: a}

        def build(n):
            t = runs.get(n)
            if t is not None:
                return t
            half = n // 2
            t = build(half)
            for _ in range(half):
                t = self.vmul(t, t)
            t = self.vmul(t, build(half))  # ones-run of length 2*half
            if n & 1:
                t = self.vmul(self.vmul(t, t), a)
            runs[n] = t
            return t

        return build(k)

    def vinv_sqrt(self, a: np.ndarray) -> np.ndarray:
        """Elementwise x with x*x*a == 1, for nonzero quadratic residues.

        Which of the two roots comes back is unspecified but
        deterministic. One exponentiation instead of sqrt-then-invert;
        for the Mersenne prime the exponent (p-3)/4 is all ones, so the
        short-chain power applies.
        """
        if self.p % 4 != 3:
            return self.vinv(self.vsqrt(a))
        e = (self.p - 3) // 4
        k = e.bit_length()
        if e == (1 << k) - 1:
            return self._vpow_ones(a, k)
        return self.vpow(a, e)

    # -- sampling ---------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """n uniform elements of [0, p).  rng=None draws from os.urandom."""
        if rng is not None:
            return rng.integers(0, self.p, size=n, dtype=np.uint64)
        mask = np.uint64((1 << self.bits) - 1)
        out = np.empty(n, dtype=np.uint64)
        filled = 0
        while filled < n:
            need = n - filled
            cand = np.frombuffer(os.urandom(8 * (need + 8)), dtype="<u8") & mask
            cand = cand[cand < self.p][:need]
            out[filled:filled + len(cand)] = cand
            filled += len(cand)
        return out

    def sample_bounded(self, n: int, bits: int,
                       rng: np.random.Generator | None = None) -> np.ndarray:
        """n uniform values in [0, 2**bits); used for smudging masks."""
        if bits <= 0:
            return np.zeros(n, dtype=np.uint64)
        if (1 << bits) > self.p:
            raise ConfigError(f"bounded sample of {bits} bits exceeds modulus")
        if rng is not None:
            return rng.integers(0, 1 << bits, size=n, dtype=np.uint64)
        raw = np.frombuffer(os.urandom(8 * n), dtype="<u8")
        return raw & np.uint64((1 << bits) - 1)

    # -- serialization ----------------------------------------------------

    def to_bytes(self, a: np.ndarray) -> bytes:
        """Canonical wire form: 8-byte little-endian unsigned per element."""
        return a.astype("<u8").tobytes()

    def from_bytes(self, data: bytes) -> np.ndarray:
        if len(data) % 8 != 0:
            raise MalformedInputError(
                f"element payload length {len(data)} is not a multiple of 8"
            )
        arr = np.frombuffer(data, dtype="<u8").copy()
        if len(arr) and int(arr.max()) >= self.p:
            bad = int(np.argmax(arr >= self.p))
            raise MalformedInputError(
                f"non-canonical field element at index {bad}: {int(arr[bad])} >= p"
            )
        return arr

    def __repr__(self):
        return f"PrimeField(p={self.p})"


class FixedPointCodec:
    """Signed fixed-point values embedded in a prime field.

    encode(x) = round_half_away(x * 2**frac_bits) mod p; the upper half of
    the field represents negatives.  int_bits bounds |x|; kappa is the
    statistical masking parameter used by truncation and comparison;
    mul_headroom_bits bounds the value of any raw product that gets
    truncated under the default magnitude budget.
    """

    def __init__(self, field: PrimeField, frac_bits: int = 16, int_bits: int = 20,
                 kappa: int = 12, mul_headroom_bits: int = 11):
        if frac_bits < 1 or int_bits < 1:
            raise ConfigError("frac_bits and int_bits must be positive")
        need = 2 * frac_bits + mul_headroom_bits + kappa + 2
        if need > field.bits:
            raise ConfigError(
                "fixed-point headroom violated: 2*frac_bits + mul_headroom_bits "
                f"+ kappa + 2 = {need} > {field.bits} field bits"
            )
        if frac_bits + int_bits + 1 + kappa + 2 > field.bits:
            raise ConfigError("comparison range m + kappa does not fit the field")
        self.field = field
        self.frac_bits = frac_bits
        self.int_bits = int_bits
        self.kappa = kappa
        self.mul_headroom_bits = mul_headroom_bits
        self.scale = 1 << frac_bits

    @property
    def m_bits(self) -> int:
        """Signed magnitude bound (bits) for comparisons: frac + int."""
        return self.frac_bits + self.int_bits

    def encode(self, x: float, frac_bits: int | None = None) -> int:
        f = self.frac_bits if frac_bits is None else frac_bits
        if abs(x) >= (1 << self.int_bits):
            raise MalformedInputError(
                f"value {x} outside fixed-point range +/-2^{self.int_bits}"
            )
        mag = int(abs(x) * (1 << f) + 0.5)  # half away from zero
        return self.field.p - mag if (x < 0 and mag) else mag

    def decode(self, v: int, frac_bits: int | None = None) -> float:
        f = self.frac_bits if frac_bits is None else frac_bits
        v %= self.field.p
        if v > self.field.p // 2:
            return -(self.field.p - v) / (1 << f)
        return v / (1 << f)

    def encode_vec(self, xs, frac_bits: int | None = None) -> np.ndarray:
        f = self.frac_bits if frac_bits is None else frac_bits
        xs = np.asarray(xs, dtype=np.float64)
        if np.any(np.abs(xs) >= (1 << self.int_bits)):
            raise MalformedInputError("vector contains values outside fixed-point range")
        mag = np.floor(np.abs(xs) * (1 << f) + 0.5).astype(np.uint64)
        out = np.where((xs < 0) & (mag > 0), np.uint64(self.field.p) - mag, mag)
        return out

    def decode_vec(self, vs: np.ndarray, frac_bits: int | None = None) -> np.ndarray:
        f = self.frac_bits if frac_bits is None else frac_bits
        half = self.field.p // 2
        # Subtract in uint64 before the float cast: p - v is small for
        # negatives, so no 53-bit mantissa loss on 61-bit values.
        mag_neg = (np.uint64(self.field.p) - vs).astype(np.float64)
        signed = np.where(vs > half, -mag_neg, vs.astype(np.float64))
        return signed / float(1 << f)
