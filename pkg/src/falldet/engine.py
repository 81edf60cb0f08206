"""Replicated three-party MPC engine over Shamir-shared vectors.

Each party runs one MpcEngine instance per session. Engines execute the
same deterministic schedule of vectorized operations; every interactive
operation advances a shared round counter and performs exactly one
batched message exchange per round through a SessionChannel.

Secret values live in numbered slots holding one share vector per party.
Handles are cheap references carrying the slot id, vector length and the
fixed-point scale of the contents. Nothing is ever revealed except
through open_output (policy checked) or the masked openings inside
truncation, comparison and bit generation, all of which are recorded in
the opening log for audit.
"""

from __future__ import annotations

import hashlib
import secrets
import threading
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PolicyError, ProtocolError, TransportError
from .field import FixedPointCodec, PrimeField
from .shamir import SharingPolicy, lagrange_weights, share_vec
from .transport import Envelope

MODE_DEBUG = "debug"
MODE_PRODUCTION = "production"

# Bounded retry for random bit generation; each attempt discards only the
# candidates whose masked square opened to zero.
_BIT_RETRY_LIMIT = 16


@dataclass(frozen=True)
class Handle:
    """Reference to a shared vector held in an engine slot."""

    slot: int
    length: int
    frac_bits: int


class RoundCounter:
    """Tracks communication rounds and messages, split by phase and op."""

    def __init__(self):
        self.total = 0
        self.messages = 0
        self.by_phase = Counter()
        self.by_op = Counter()

    def record(self, phase, op, messages):
        self.total += 1
        self.messages += messages
        self.by_phase[phase] += 1
        self.by_op[op] += 1

    def snapshot(self):
        return {
            "total": self.total,
            "messages": self.messages,
            "by_phase": dict(self.by_phase),
            "by_op": dict(self.by_op),
        }


class SessionChannel:
    """Round-synchronized peer exchange for a single session.

    Incoming envelopes may arrive out of order or duplicated; they are
    buffered by (round, sender) and handed out when the engine asks for
    that round. Sending is delegated to a transport callback.
    """

    def __init__(self, session_id, party_index, peer_indices, send_fn, timeout=120.0):
        self.session_id = session_id
        self.party_index = party_index
        self.peer_indices = tuple(sorted(peer_indices))
        self._send_fn = send_fn
        self.timeout = timeout
        self._buf = {}
        self._seen = set()
        self._cv = threading.Condition()
        self._closed = False

    def deliver(self, env: Envelope):
        """Called by the transport layer for every inbound mpc_round envelope."""
        if env.msg_type != "mpc_round" or env.session_id != self.session_id:
            return
        key = env.key()
        with self._cv:
            if key in self._seen:
                return
            self._seen.add(key)
            self._buf[(env.round, env.sender)] = env
            self._cv.notify_all()

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def exchange(self, round_no, op, outgoing, expect, meta=None):
        """Send one envelope per destination, then gather this round's peers.

        outgoing maps party index -> payload bytes; expect is the set of
        senders whose round messages we block on. Returns sender -> Envelope.
        """
        head = {"op": op}
        if meta:
            head.update(meta)
        for dest, payload in outgoing.items():
            env = Envelope(
                session_id=self.session_id,
                sender=self.party_index,
                msg_type="mpc_round",
                round=round_no,
                seq=0,
                payload=payload,
                meta=head,
            )
            self._send_fn(dest, env)
        if not expect:
            return {}
        deadline = time.monotonic() + self.timeout
        got = {}
        with self._cv:
            while True:
                for src in expect:
                    k = (round_no, src)
                    if src not in got and k in self._buf:
                        got[src] = self._buf.pop(k)
                if len(got) == len(expect):
                    return got
                if self._closed:
                    raise TransportError("channel closed during round %d" % round_no)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(set(expect) - set(got))
                    raise TransportError(
                        "timed out in round %d (%s) waiting for parties %s"
                        % (round_no, op, missing)
                    )
                self._cv.wait(timeout=min(remaining, 1.0))


class MpcEngine:
    """One party's view of the shared computation.

    All vectors are numpy uint64 arrays of canonical field elements. The
    engine enforces the opening policy: in production mode only handles
    explicitly marked as outputs may be opened in the clear.
    """

    def __init__(self, field: PrimeField, codec: FixedPointCodec, policy: SharingPolicy,
                 party_index, channel: SessionChannel, mode=MODE_PRODUCTION, rng=None):
        if policy.n != 2 * policy.degree + 1:
            raise ConfigError(
                "engine requires n == 2d + 1 (got n=%d, d=%d)" % (policy.n, policy.degree)
            )
        if not 1 <= party_index <= policy.n:
            raise ConfigError("party index %r outside 1..%d" % (party_index, policy.n))
        if mode not in (MODE_DEBUG, MODE_PRODUCTION):
            raise ConfigError("unknown engine mode %r" % mode)
        self.field = field
        self.codec = codec
        self.policy = policy
        self.party = party_index
        self.channel = channel
        self.mode = mode
        self.rng = rng
        self.counter = RoundCounter()
        self.openings = []
        self._slots = {}
        self._next_slot = 0
        self._round = 0
        self._phase = "setup"
        self._outputs = set()
        self._parties = tuple(range(1, policy.n + 1))
        self._peers = tuple(i for i in self._parties if i != party_index)
        # Recombination weights for degree reduction and for openings, both
        # interpolating at zero from all n evaluation points.
        self._all_weights = lagrange_weights(self._parties, field)

    # ------------------------------------------------------------------
    # slot and handle plumbing

    def _alloc(self, values, frac_bits):
        slot = self._next_slot
        self._next_slot += 1
        self._slots[slot] = values
        return Handle(slot, int(values.shape[0]), frac_bits)

    def _vals(self, h: Handle):
        return self._slots[h.slot]

    def load_input(self, shares, frac_bits):
        """Register an already-shared input column (this party's shares)."""
        arr = self.field.arr(shares)
        return self._alloc(arr, frac_bits)

    def mark_output(self, h: Handle):
        self._outputs.add(h.slot)

    @contextmanager
    def phase(self, label):
        prev = self._phase
        self._phase = label
        try:
            yield
        finally:
            self._phase = prev

    @property
    def rounds(self):
        return self._round

    # ------------------------------------------------------------------
    # local (non-interactive) operations

    def add(self, a, b):
        self._check_pair(a, b)
        return self._alloc(self.field.vadd(self._vals(a), self._vals(b)), a.frac_bits)

    def sub(self, a, b):
        self._check_pair(a, b)
        return self._alloc(self.field.vsub(self._vals(a), self._vals(b)), a.frac_bits)

    def neg(self, h):
        return self._alloc(self.field.vneg(self._vals(h)), h.frac_bits)

    def add_public(self, h, raw):
        """Add public field elements (already at the handle's scale)."""
        vals = self._public_vec(raw, h.length)
        return self._alloc(self.field.vadd(self._vals(h), vals), h.frac_bits)

    def mul_public(self, h, raw, raw_frac_bits=0):
        """Multiply by public field elements; scales add."""
        vals = self._public_vec(raw, h.length)
        return self._alloc(self.field.vmul(self._vals(h), vals), h.frac_bits + raw_frac_bits)

    def scale_public(self, h, scalar, scalar_frac_bits=0):
        return self._alloc(self.field.vscale(scalar % self.field.p, self._vals(h)),
                           h.frac_bits + scalar_frac_bits)

    def lincomb_public(self, handles, raw_coeffs, out_frac_bits):
        """sum_i coeff_i * h_i for public scalar coefficients."""
        if not handles:
            raise ProtocolError("empty linear combination")
        acc = None
        for h, c in zip(handles, raw_coeffs):
            term = self.field.vscale(int(c) % self.field.p, self._vals(h))
            acc = term if acc is None else self.field.vadd(acc, term)
        return self._alloc(acc, out_frac_bits)

    def concat(self, handles):
        frac = handles[0].frac_bits
        for h in handles:
            if h.frac_bits != frac:
                raise ProtocolError("concat requires a uniform scale")
        return self._alloc(np.concatenate([self._vals(h) for h in handles]), frac)

    def permute(self, h, indices):
        """Local reorder/gather of a shared vector by public indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= h.length):
            raise ProtocolError("permutation index out of range")
        return self._alloc(self._vals(h)[idx], h.frac_bits)

    def segment_sum(self, h, seg_len):
        """Local sums over consecutive segments of seg_len elements."""
        if seg_len < 1 or h.length % seg_len:
            raise ProtocolError(
                "vector of %d does not divide into segments of %d"
                % (h.length, seg_len)
            )
        v = self._vals(h).reshape(-1, seg_len)
        acc = v[:, 0].copy()
        for j in range(1, seg_len):
            acc = self.field.vadd(acc, v[:, j])
        return self._alloc(acc, h.frac_bits)

    def retag(self, h, frac_bits):
        """Reinterpret the scale tag without touching shares.

        Used when a public power-of-two factor has been folded into a
        truncation, so the raw value already sits at the new scale.
        """
        return Handle(h.slot, h.length, frac_bits)

    def slice(self, h, start, stop):
        if not (0 <= start <= stop <= h.length):
            raise ProtocolError("slice out of range")
        return self._alloc(self._vals(h)[start:stop].copy(), h.frac_bits)

    def sum(self, h):
        """Local sum of all elements into a length-1 handle."""
        return self._alloc(self.field.arr([self.field.vsum(self._vals(h))]), h.frac_bits)

    def _check_pair(self, a, b):
        if a.length != b.length:
            raise ProtocolError("length mismatch: %d vs %d" % (a.length, b.length))
        if a.frac_bits != b.frac_bits:
            raise ProtocolError(
                "scale mismatch: %d vs %d fractional bits" % (a.frac_bits, b.frac_bits)
            )

    def _public_vec(self, raw, length):
        if isinstance(raw, (int, np.integer)):
            return np.full(length, int(raw) % self.field.p, dtype=np.uint64)
        arr = self.field.arr(raw)
        if arr.shape[0] != length:
            raise ProtocolError("public vector length mismatch")
        return arr

    # ------------------------------------------------------------------
    # exchange helpers

    def _exchange(self, op, outgoing, expect, meta=None):
        """One communication round: returns sender -> uint64 share vector."""
        self._round += 1
        payloads = {dest: self.field.to_bytes(arr) for dest, arr in outgoing.items()}
        got = self.channel.exchange(self._round, op, payloads, expect, meta)
        self.counter.record(self._phase, op, len(payloads))
        return {src: self.field.from_bytes(env.payload) for src, env in got.items()}

    def _reshare_round(self, op, local_vec):
        """Share local_vec to all parties, return summed-by-weights fresh shares.

        Every party contributes; the caller combines the received rows. Used
        for degree reduction (with Lagrange weights) and for additive
        contributions (with unit weights).
        """
        rows = share_vec(local_vec, self.policy, self.field, rng=self.rng)
        outgoing = {j: rows[j - 1] for j in self._peers}
        received = self._exchange(op, outgoing, set(self._peers))
        received[self.party] = rows[self.party - 1]
        return received

    def _degree_reduce(self, local_products, op):
        """Turn a locally multiplied (degree 2d) vector into fresh degree-d shares."""
        received = self._reshare_round(op, local_products)
        ordered = [received[i] for i in self._parties]
        return self.field.vlincomb(self._all_weights, ordered)

    # ------------------------------------------------------------------
    # interactive arithmetic

    def mul(self, a, b):
        """Element-wise secret product. One round; result scale is the sum."""
        self._check_len(a, b)
        prod = self.field.vmul(self._vals(a), self._vals(b))
        return self._alloc(self._degree_reduce(prod, "mul"),
                           a.frac_bits + b.frac_bits)

    def inner_product(self, a, b):
        """Secret dot product in one round: local sum of products, then reduce."""
        self._check_len(a, b)
        prods = self.field.vmul(self._vals(a), self._vals(b))
        total = self.field.arr([self.field.vsum(prods)])
        return self._alloc(self._degree_reduce(total, "inner_product"),
                           a.frac_bits + b.frac_bits)

    def _check_len(self, a, b):
        if a.length != b.length:
            raise ProtocolError("length mismatch: %d vs %d" % (a.length, b.length))

    def input_from(self, src_party, raw_values=None, length=None, frac_bits=0):
        """One party injects a secret vector; everyone gets fresh shares. 1 round."""
        if self.party == src_party:
            vals = self.field.arr(raw_values)
            rows = share_vec(vals, self.policy, self.field, rng=self.rng)
            outgoing = {j: rows[j - 1] for j in self._peers}
            self._exchange("input", outgoing, set())
            mine = rows[self.party - 1]
        else:
            if length is None:
                raise ProtocolError("receiving parties must pass the expected length")
            got = self._exchange("input", {}, {src_party})
            mine = got[src_party]
            if mine.shape[0] != length:
                raise ProtocolError(
                    "input length mismatch: expected %d, got %d" % (length, mine.shape[0])
                )
        return self._alloc(mine, frac_bits)

    # ------------------------------------------------------------------
    # openings

    def _open_shares(self, shares, op, kind, slots):
        """Broadcast shares, reconstruct from all parties. One round."""
        outgoing = {j: shares for j in self._peers}
        received = self._exchange(op, outgoing, set(self._peers))
        received[self.party] = shares
        ordered = [received[i] for i in self._parties]
        clear = self.field.vlincomb(self._all_weights, ordered)
        if self.mode == MODE_DEBUG and kind == "output":
            self._check_share_consistency(received, clear, op)
        self.openings.append({
            "kind": kind,
            "op": op,
            "round": self._round,
            "phase": self._phase,
            "slots": slots,
            "count": int(shares.shape[0]),
        })
        return clear

    def _check_share_consistency(self, received, clear, op):
        k = self.policy.reconstruct_count
        idx = self._parties
        for drop in idx:
            subset = [i for i in idx if i != drop]
            if len(subset) < k:
                continue
            w = lagrange_weights(subset, self.field)
            alt = self.field.vlincomb(w, [received[i] for i in subset])
            if not np.array_equal(alt, clear):
                raise ProtocolError("inconsistent shares during %s opening" % op)

    def _open_masked(self, shares, op):
        return self._open_shares(shares, op, "masked", None)

    def open_output(self, h):
        """Open a marked output handle in the clear. Policy checked."""
        if self.mode == MODE_PRODUCTION and h.slot not in self._outputs:
            raise PolicyError(
                "refusing to open slot %d: not marked as a session output" % h.slot
            )
        return self._open_shares(self._vals(h), "open", "output", (h.slot, h.length))

    # ------------------------------------------------------------------
    # shared randomness

    def rand_element(self, count=1):
        """Uniform shared field elements, unknown to all. 1 round."""
        contrib = self.field.sample(count, rng=self.rng)
        received = self._reshare_round("rand", contrib)
        ordered = [received[i] for i in self._parties]
        total = ordered[0]
        for row in ordered[1:]:
            total = self.field.vadd(total, row)
        return self._alloc(total, 0)

    def rand_bits(self, count):
        """count uniform shared bits. 3 rounds (contribute, square, masked open)."""
        bits, _ = self._rand_bits_masks(count, [])
        return self._alloc(bits, 0)

    def rand_bit(self):
        return self.rand_bits(1)

    def _rand_bits_masks(self, bit_count, mask_specs):
        """Batched shared randomness: bit_count uniform bits plus bounded masks.

        mask_specs is a list of (count, width_bits); each mask is a sum of n
        party contributions drawn below 2^(width-2), so the total stays under
        2^width. Costs 3 rounds (plus retries if a bit candidate squares to
        zero, which is vanishingly rare for large fields).
        """
        for _, width in mask_specs:
            if width < 2 or width >= self.field.bits:
                raise ProtocolError("mask width %d out of range" % width)
        margin = 2 if self.field.bits > 40 else max(8, bit_count // 4)
        bits_out = None
        masks_out = None
        need = bit_count
        attempts = 0
        while need > 0 or masks_out is None:
            attempts += 1
            if attempts > _BIT_RETRY_LIMIT:
                raise ProtocolError("random bit generation kept hitting zero squares")
            gen = need + margin if bit_count else 0
            specs = mask_specs if masks_out is None else []
            cand, masks = self._randomness_round(gen, specs)
            if masks_out is None:
                masks_out = masks
            if gen == 0:
                break
            good = self._bits_from_candidates(cand)
            bits_out = good if bits_out is None else np.concatenate([bits_out, good])
            need = bit_count - int(bits_out.shape[0])
        if bit_count:
            bits_out = bits_out[:bit_count]
        else:
            bits_out = self.field.arr([])
        return bits_out, masks_out

    def _randomness_round(self, bit_candidates, mask_specs):
        """One additive-contribution round for bit candidates and masks."""
        parts = []
        if bit_candidates:
            parts.append(self.field.sample(bit_candidates, rng=self.rng))
        for count, width in mask_specs:
            parts.append(self.field.sample_bounded(count, width - 2, rng=self.rng))
        contrib = np.concatenate(parts) if parts else self.field.arr([])
        received = self._reshare_round("rand", contrib)
        total = None
        for i in self._parties:
            total = received[i] if total is None else self.field.vadd(total, received[i])
        cand = total[:bit_candidates]
        masks = []
        off = bit_candidates
        for count, _ in mask_specs:
            masks.append(total[off:off + count])
            off += count
        return cand, masks

    def _bits_from_candidates(self, cand):
        """Square candidates, open masked, map survivors to unbiased bits."""
        sq = self._degree_reduce(self.field.vmul(cand, cand), "mul")
        c = self._open_masked(sq, "rand_bit")
        keep = c != 0
        if not keep.any():
            return self.field.arr([])
        c = c[keep]
        cand = cand[keep]
        # 1/sqrt(c) is public and identical at every party; r * (1/sqrt(r^2))
        # is a uniform sign, so (r/sqrt(c) + 1)/2 is an unbiased bit.
        inv_sigma = self.field.vinv_sqrt(c)
        ones = np.ones(c.shape[0], dtype=np.uint64)
        probe = self.field.vmul(self.field.vmul(inv_sigma, inv_sigma), c)
        if not np.array_equal(probe, ones):
            raise ProtocolError("opened square has no square root; corrupt shares")
        half = pow(2, self.field.p - 2, self.field.p)
        scaled = self.field.vmul(cand, inv_sigma)
        return self.field.vscale(half, self.field.vadd(scaled, ones))

    # ------------------------------------------------------------------
    # truncation

    def trunc(self, h, k, mag_bits=None):
        """Probabilistic right shift by k bits (error at most one ulp).

        mag_bits bounds the magnitude of the signed contents: |value| must
        stay below 2^(mag_bits - 1) in field-integer terms. The default
        covers a single fixed-point product. 4 rounds.
        """
        f = self.codec
        if mag_bits is None:
            mag_bits = 2 * f.frac_bits + f.mul_headroom_bits
        if not 0 < k < mag_bits:
            raise ProtocolError("shift %d out of range for magnitude %d" % (k, mag_bits))
        if mag_bits + f.kappa + 2 > self.field.bits:
            raise ProtocolError(
                "truncation range overflow: %d magnitude + %d statistical bits "
                "exceed the %d-bit field" % (mag_bits, f.kappa, self.field.bits)
            )
        L = h.length
        mask_width = mag_bits + 1 - k + f.kappa
        bits, (mask,) = self._rand_bits_masks(k * L, [(L, mask_width)])
        bit_mat = bits.reshape(L, k)
        r_low = self._weighted_bit_sum(bit_mat)
        offset = pow(2, mag_bits, self.field.p)
        shifted = self.field.vadd(self._vals(h),
                                  np.full(L, offset, dtype=np.uint64))
        masked = self.field.vadd(self.field.vadd(shifted, r_low),
                                 self.field.vscale(pow(2, k, self.field.p), mask))
        c = self._open_masked(masked, "trunc")
        c_low = c & np.uint64((1 << k) - 1)
        num = self.field.vsub(self.field.vadd(shifted, r_low), c_low)
        res = self.field.vscale(pow(pow(2, k, self.field.p), self.field.p - 2, self.field.p),
                                num)
        back = pow(2, mag_bits - k, self.field.p)
        res = self.field.vsub(res, np.full(L, back, dtype=np.uint64))
        return self._alloc(res, h.frac_bits - k)

    def _weighted_bit_sum(self, bit_mat):
        """sum_j 2^j * column_j for a (L, k) matrix of bit shares."""
        L, k = bit_mat.shape
        acc = self.field.arr(np.zeros(L, dtype=np.uint64))
        for j in range(k):
            acc = self.field.vadd(acc, self.field.vscale(1 << j, bit_mat[:, j]))
        return acc

    # ------------------------------------------------------------------
    # comparison

    def greater_equal(self, a, b=None, public=None):
        """Shared bit: 1 where a >= b elementwise, with |a-b| < 2^m.

        b may be a handle or a public raw vector/scalar (pass via public=).
        Both operands must be at the same scale; the result is a bit vector
        at scale 0. 10 rounds regardless of vector length.
        """
        if (b is None) == (public is None):
            raise ProtocolError("greater_equal takes exactly one of b or public")
        if b is not None:
            self._check_pair(a, b)
            diff = self.field.vsub(self._vals(a), self._vals(b))
        else:
            pub = self._public_vec(public, a.length)
            diff = self.field.vsub(self._vals(a), pub)
        m = self.codec.m_bits
        L = a.length
        offset = pow(2, m, self.field.p)
        z = self.field.vadd(diff, np.full(L, offset, dtype=np.uint64))
        bits, (mask,) = self._rand_bits_masks(m * L, [(L, self.codec.kappa + 2)])
        bit_mat = bits.reshape(L, m)
        r_low = self._weighted_bit_sum(bit_mat)
        masked = self.field.vadd(self.field.vadd(z, r_low),
                                 self.field.vscale(pow(2, m, self.field.p), mask))
        c = self._open_masked(masked, "compare")
        c_low = (c & np.uint64((1 << m) - 1)).astype(np.uint64)
        u = self._bit_lt(c_low, bit_mat)
        z_low = self.field.vadd(
            self.field.vsub(self.field.arr(c_low), r_low),
            self.field.vscale(offset, u))
        ge = self.field.vscale(pow(offset, self.field.p - 2, self.field.p),
                               self.field.vsub(z, z_low))
        return self._alloc(ge, 0)

    def _bit_lt(self, c_low, bit_mat):
        """Shared bit per row: 1 where public c_low < shared bit value.

        Log-depth block tree over bit positions. Leaves are local because c
        is public; each merge level costs one mul round.
        """
        L, m = bit_mat.shape
        one = np.ones(L, dtype=np.uint64)
        blocks = []  # most significant first: (lt, eq) share vectors
        for j in range(m - 1, -1, -1):
            c_j = ((c_low >> np.uint64(j)) & np.uint64(1)).astype(bool)
            r_j = bit_mat[:, j]
            lt = np.where(c_j, np.zeros(L, dtype=np.uint64), r_j)
            eq = np.where(c_j, r_j, self.field.vsub(one, r_j))
            blocks.append((lt, eq))
        while len(blocks) > 1:
            merged = []
            pairs = []
            for i in range(0, len(blocks) - 1, 2):
                pairs.append((blocks[i], blocks[i + 1]))
            tail = blocks[-1] if len(blocks) % 2 else None
            # One batched mul for eq_hi*lt_lo and eq_hi*eq_lo across all pairs.
            left = np.concatenate([np.concatenate([hi[1], hi[1]]) for hi, _ in pairs])
            right = np.concatenate([np.concatenate([lo[0], lo[1]]) for _, lo in pairs])
            prod = self._degree_reduce(self.field.vmul(left, right), "mul")
            for idx, (hi, lo) in enumerate(pairs):
                seg = prod[idx * 2 * L:(idx + 1) * 2 * L]
                lt = self.field.vadd(hi[0], seg[:L])
                eq = seg[L:]
                merged.append((lt, eq))
            if tail is not None:
                merged.append(tail)
            blocks = merged
        return blocks[0][0]

    # ------------------------------------------------------------------
    # composite operations

    def select(self, bit, a, b):
        """b + bit * (a - b): a where bit is 1, else b. One round, no trunc."""
        self._check_pair(a, b)
        if bit.length != a.length:
            raise ProtocolError("selector length mismatch")
        diff = self.sub(a, b)
        scaled = self.mul(bit, diff)
        return self.add(b, scaled)

    def window_min_max(self, h, window_len=None):
        """Tournament min and max per window of window_len elements.

        The vector is treated as consecutive windows (default: one window
        spanning the whole vector). Returns (min, max) handles with one
        element per window. ceil(log2 window_len) levels, each one batched
        comparison plus one select mul, independent of the window count.
        """
        L = window_len if window_len is not None else h.length
        if L < 1 or h.length % L:
            raise ProtocolError(
                "vector of %d does not divide into windows of %s" % (h.length, L)
            )
        W = h.length // L
        cur_min = self._vals(h).reshape(W, L).copy()
        cur_max = cur_min.copy()
        frac = h.frac_bits
        while cur_min.shape[1] > 1:
            n = cur_min.shape[1]
            k = n // 2
            a_mx, b_mx = cur_max[:, 0:2 * k:2], cur_max[:, 1:2 * k:2]
            a_mn, b_mn = cur_min[:, 0:2 * k:2], cur_min[:, 1:2 * k:2]
            lhs = self._alloc(np.concatenate([a_mx.ravel(), a_mn.ravel()]), frac)
            rhs = self._alloc(np.concatenate([b_mx.ravel(), b_mn.ravel()]), frac)
            g = self.greater_equal(lhs, rhs)
            pairmax = self._vals(self.add(rhs, self.mul(g, self.sub(lhs, rhs))))
            half = W * k
            nxt_max = pairmax[:half].reshape(W, k)
            nxt_min = self.field.vsub(self.field.vadd(a_mn.ravel(), b_mn.ravel()),
                                      pairmax[half:]).reshape(W, k)
            if n % 2:
                nxt_max = np.concatenate([nxt_max, cur_max[:, -1:]], axis=1)
                nxt_min = np.concatenate([nxt_min, cur_min[:, -1:]], axis=1)
            cur_max, cur_min = nxt_max, nxt_min
        return (self._alloc(cur_min.ravel(), frac),
                self._alloc(cur_max.ravel(), frac))

    # Newton iteration seed for inverse square root on [1, 16), quadratic in
    # the normalized input; worst-case relative error about 0.32, well inside
    # the convergence region.
    _SQRT_C0 = 0.74425509
    _SQRT_C1 = -0.06561673
    _SQRT_C2 = 0.00227653
    _SQRT_ITERS = 5

    def secure_sqrt(self, h):
        """Element-wise square root of nonnegative fixed-point values.

        Obliviously normalizes each value into [1, 16) with a power-of-16
        scale picked by three batched threshold comparisons, seeds 1/sqrt
        with a quadratic, runs Newton iterations, then multiplies back.
        Accurate to well below 2^-8 relative error for inputs in [2^-4, 2^12);
        smaller inputs degrade gracefully toward an exact zero at zero.
        """
        f = self.codec.frac_bits
        L = h.length
        enc = lambda x: self.codec.encode(x)
        # Threshold comparisons against 1, 16, 256 in one batch.
        reps = self.concat([h, h, h])
        thresholds = np.concatenate([
            np.full(L, enc(1.0), dtype=np.uint64),
            np.full(L, enc(16.0), dtype=np.uint64),
            np.full(L, enc(256.0), dtype=np.uint64),
        ])
        g = self.greater_equal(reps, public=thresholds)
        gv = self._vals(g)
        b1, b2, b3 = gv[:L], gv[L:2 * L], gv[2 * L:]
        one = np.ones(L, dtype=np.uint64)
        sel = [self.field.vsub(one, b1), self.field.vsub(b1, b2),
               self.field.vsub(b2, b3), b3]
        # sigma^2 in {16, 1, 1/16, 1/256}, 1/sigma in {1/4, 1, 4, 16}.
        sig2_enc = [enc(16.0), enc(1.0), enc(1.0 / 16), enc(1.0 / 256)]
        isig_enc = [enc(0.25), enc(1.0), enc(4.0), enc(16.0)]
        sigma2 = self._selector_combo(sel, sig2_enc, L, f)
        inv_sigma = self._selector_combo(sel, isig_enc, L, f)
        # Normalize: a' = value * sigma^2 lands in [1, 16) for in-range inputs.
        a_norm = self.trunc(self.mul(h, sigma2), f, mag_bits=2 * f + 6)
        # Quadratic seed y0 = C0 + C1*a' + C2*a'^2 for 1/sqrt(a').
        sq = self.trunc(self.mul(a_norm, a_norm), f, mag_bits=2 * f + 10)
        seed = self.lincomb_public(
            [a_norm, sq], [enc(self._SQRT_C1), enc(self._SQRT_C2)], 2 * f)
        seed = self.add_public(seed, pow(2, f, self.field.p) * enc(self._SQRT_C0)
                               % self.field.p)
        y = self.trunc(seed, f, mag_bits=2 * f + 4)
        three = enc(3.0)
        for _ in range(self._SQRT_ITERS):
            u = self.trunc(self.mul(y, y), f, mag_bits=2 * f + 4)
            v = self.trunc(self.mul(a_norm, u), f, mag_bits=2 * f + 7)
            w = self.add_public(self.neg(v), three)
            # y <- y * (3 - v) / 2; the halving folds into the shift, so the
            # result is still a scale-f value and gets retagged as such.
            y = self.retag(self.trunc(self.mul(y, w), f + 1, mag_bits=2 * f + 4), f)
        s = self.trunc(self.mul(a_norm, y), f, mag_bits=2 * f + 7)
        out = self.trunc(self.mul(s, inv_sigma), f, mag_bits=2 * f + 8)
        return out

    def _selector_combo(self, sel, raw_consts, L, frac_bits):
        """sum_k sel_k * const_k with public constants; local."""
        acc = self.field.arr(np.zeros(L, dtype=np.uint64))
        for s, c in zip(sel, raw_consts):
            acc = self.field.vadd(acc, self.field.vscale(int(c), s))
        return self._alloc(acc, frac_bits)

    # ------------------------------------------------------------------
    # debug helpers

    def debug_open(self, h):
        """Open any handle regardless of policy. Debug mode only."""
        if self.mode != MODE_DEBUG:
            raise PolicyError("debug_open is only available in debug mode")
        return self._open_shares(self._vals(h), "open", "debug", (h.slot, h.length))

    def transcript_digest(self):
        summary = repr(sorted(
            (o["kind"], o["op"], o["round"], o["count"]) for o in self.openings
        )).encode()
        return hashlib.sha256(summary).hexdigest()


def make_local_session(field, codec, policy, hub, session_id=None, mode=MODE_PRODUCTION,
                       seed=None, timeout=120.0):
    """Wire up n engines over an in-memory hub; returns (engines, channels).

    Convenience for tests and single-process pipelines. With seed set, each
    party gets an independent deterministic generator.
    """
    sid = session_id if session_id is not None else secrets.token_bytes(16)
    endpoints = {i: hub.endpoint(i) for i in range(1, policy.n + 1)}
    channels = {}
    engines = {}
    for i in range(1, policy.n + 1):
        peers = [j for j in range(1, policy.n + 1) if j != i]
        chan = SessionChannel(sid, i, peers, endpoints[i].send, timeout=timeout)
        ep = endpoints[i]
        ep.on_receive = chan.deliver
        channels[i] = chan
        rng = np.random.default_rng(seed + i) if seed is not None else None
        engines[i] = MpcEngine(field, codec, policy, i, chan, mode=mode, rng=rng)
    return engines, channels
