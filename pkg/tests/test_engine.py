"""MPC engine tests: three in-process parties against plaintext oracles.

Every test runs the same program on all three engines (one thread each)
over an in-memory hub, then checks opened results against an independent
integer or float oracle. Round counts are asserted against the published
per-operation costs.
"""

import os
import threading

import numpy as np
import pytest

from falldet.engine import (
    MODE_DEBUG,
    MODE_PRODUCTION,
    MpcEngine,
    SessionChannel,
    make_local_session,
)
from falldet.errors import ConfigError, PolicyError, ProtocolError
from falldet.field import MERSENNE61, FixedPointCodec, PrimeField
from falldet.shamir import SharingPolicy, lagrange_weights, share_vec
from falldet.transport import InMemoryHub

F61 = PrimeField(MERSENNE61)
C61 = FixedPointCodec(F61)
POLICY = SharingPolicy(n=3, degree=1)

F97 = PrimeField(97)

# Bulk sizes scale down for quick local runs via FALLDET_TEST_SCALE.
SCALE = float(os.environ.get("FALLDET_TEST_SCALE", "1"))


def bulk(n):
    return max(16, int(n * SCALE))


def run_parties(engines, program):
    """Run program(engine) on every engine in its own thread."""
    results = {}
    errors = []

    def worker(i, eng):
        try:
            results[i] = program(eng)
        except Exception as e:  # propagated below
            errors.append((i, e))

    threads = [threading.Thread(target=worker, args=(i, e), daemon=True)
               for i, e in engines.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=120)
    if errors:
        raise errors[0][1]
    if len(results) != len(engines):
        raise TimeoutError("some parties did not finish")
    return results


def session(seed=7, mode=MODE_DEBUG, timeout=60.0):
    hub = InMemoryHub()
    engines, _ = make_local_session(F61, C61, POLICY, hub, mode=mode,
                                    seed=seed, timeout=timeout)
    return engines


def small_field_session(seed):
    # F97 engines for statistical tests; the codec is unused there but the
    # engine wants one, so hand it the default large-field codec.
    hub = InMemoryHub()
    engines, _ = make_local_session(F97, C61, POLICY, hub,
                                    mode=MODE_DEBUG, seed=seed)
    return engines


def shared_input(engines, values, frac_bits=0, seed=1234):
    """Secret-share a plaintext vector and load each party's row."""
    rows = share_vec(F61.arr(values), POLICY, F61,
                     rng=np.random.default_rng(seed))
    handles = {}
    for i, eng in engines.items():
        handles[i] = eng.load_input(rows[i - 1], frac_bits)
    return handles


def opened(engines, program):
    """Run and return party 1's result (all parties agree by construction)."""
    res = run_parties(engines, program)
    first = res[1]
    for other in res.values():
        assert np.array_equal(np.asarray(first), np.asarray(other))
    return first


def signed(arr):
    """Map canonical field values to signed Python ints."""
    out = []
    for v in np.asarray(arr).tolist():
        v = int(v)
        out.append(v - F61.p if v > F61.p // 2 else v)
    return out


class TestEngineBasics:
    def test_rejects_wrong_party_count(self):
        hub = InMemoryHub()
        chan = SessionChannel(b"\x00" * 16, 1, [2, 3], hub.endpoint(1).send)
        with pytest.raises(ConfigError, match="2d"):
            MpcEngine(F61, C61, SharingPolicy(n=5, degree=1), 1, chan)

    def test_local_ops_match_ints(self):
        engines = session()
        a_vals = [5, F61.p - 3, 17, 0]
        b_vals = [11, 7, F61.p - 1, 2]
        handles_a = shared_input(engines, a_vals)
        handles_b = shared_input(engines, b_vals, seed=99)

        def program(eng):
            a, b = handles_a[eng.party], handles_b[eng.party]
            s = eng.add(a, b)
            d = eng.sub(a, b)
            n = eng.neg(a)
            sc = eng.scale_public(s, 3)
            out = eng.concat([s, d, n, sc])
            return eng.debug_open(out)

        got = opened(engines, program)
        p = F61.p
        want = ([(x + y) % p for x, y in zip(a_vals, b_vals)]
                + [(x - y) % p for x, y in zip(a_vals, b_vals)]
                + [(-x) % p for x in a_vals]
                + [3 * (x + y) % p for x, y in zip(a_vals, b_vals)])
        assert got.tolist() == [w % p for w in want]

    def test_mul_matches_ints(self):
        engines = session()
        rng = np.random.default_rng(5)
        n = bulk(500)
        a_vals = [int(x) for x in rng.integers(0, F61.p, n, dtype=np.uint64)]
        b_vals = [int(x) for x in rng.integers(0, F61.p, n, dtype=np.uint64)]
        ha = shared_input(engines, a_vals)
        hb = shared_input(engines, b_vals, seed=51)

        def program(eng):
            return eng.debug_open(eng.mul(ha[eng.party], hb[eng.party]))

        got = opened(engines, program)
        want = [a * b % F61.p for a, b in zip(a_vals, b_vals)]
        assert got.tolist() == want

    def test_inner_product_matches_ints(self):
        engines = session()
        rng = np.random.default_rng(6)
        n = 200
        a_vals = [int(x) for x in rng.integers(0, F61.p, n, dtype=np.uint64)]
        b_vals = [int(x) for x in rng.integers(0, F61.p, n, dtype=np.uint64)]
        ha = shared_input(engines, a_vals)
        hb = shared_input(engines, b_vals, seed=52)

        def program(eng):
            return eng.debug_open(eng.inner_product(ha[eng.party], hb[eng.party]))

        got = opened(engines, program)
        want = sum(a * b for a, b in zip(a_vals, b_vals)) % F61.p
        assert got.tolist() == [want]

    def test_input_from_one_party(self):
        engines = session()
        secret = [10, 20, 30]

        def program(eng):
            if eng.party == 2:
                h = eng.input_from(2, raw_values=secret, frac_bits=0)
            else:
                h = eng.input_from(2, length=3, frac_bits=0)
            return eng.debug_open(h)

        got = opened(engines, program)
        assert got.tolist() == secret

    def test_random_linear_programs_match_oracle(self):
        # Mixed add/sub/mul/scale chains over random inputs.
        rng = np.random.default_rng(17)
        reps = max(2, int(6 * SCALE))
        for rep in range(reps):
            engines = session(seed=rep)
            n = 24
            vals = [[int(x) for x in rng.integers(0, F61.p, n, dtype=np.uint64)]
                    for _ in range(3)]
            hs = [shared_input(engines, v, seed=rep * 10 + k)
                  for k, v in enumerate(vals)]
            consts = [int(x) for x in rng.integers(1, 1000, 3)]

            def program(eng):
                a, b, c = (h[eng.party] for h in hs)
                t1 = eng.mul(eng.add(a, b), c)
                t2 = eng.sub(t1, eng.scale_public(a, consts[0]))
                t3 = eng.mul(t2, t2)
                t4 = eng.add_public(t3, consts[1])
                return eng.debug_open(t4)

            got = opened(engines, program)
            p = F61.p
            want = []
            for j in range(n):
                t1 = (vals[0][j] + vals[1][j]) * vals[2][j] % p
                t2 = (t1 - consts[0] * vals[0][j]) % p
                t3 = t2 * t2 % p
                want.append((t3 + consts[1]) % p)
            assert got.tolist() == want


class TestRoundCosts:
    """Communication rounds per operation, independent of vector length."""

    def test_mul_is_one_round(self):
        engines = session()
        ha = shared_input(engines, [3] * 50)
        hb = shared_input(engines, [4] * 50, seed=2)
        run_parties(engines, lambda e: e.mul(ha[e.party], hb[e.party]))
        assert engines[1].counter.total == 1
        assert engines[1].counter.by_op == {"mul": 1}

    def test_inner_product_is_one_round(self):
        engines = session()
        ha = shared_input(engines, [3] * 50)
        hb = shared_input(engines, [4] * 50, seed=2)
        run_parties(engines, lambda e: e.inner_product(ha[e.party], hb[e.party]))
        assert engines[1].counter.total == 1

    def test_rand_element_is_one_round(self):
        engines = session()
        run_parties(engines, lambda e: e.rand_element(32))
        assert engines[1].counter.total == 1

    def test_rand_bit_is_three_rounds(self):
        engines = session()
        run_parties(engines, lambda e: e.rand_bits(64))
        assert engines[1].counter.total == 3

    def test_open_is_one_round(self):
        engines = session()
        ha = shared_input(engines, [3, 4])
        run_parties(engines, lambda e: e.debug_open(ha[e.party]))
        assert engines[1].counter.total == 1

    def test_trunc_is_four_rounds_any_length(self):
        for n in (1, 40):
            engines = session()
            ha = shared_input(engines, [1 << 20] * n, frac_bits=32)
            run_parties(engines, lambda e: e.trunc(ha[e.party], 16))
            assert engines[1].counter.total == 4

    def test_compare_rounds_input_size_independent(self):
        counts = []
        for n in (1, 8, 64):
            engines = session()
            ha = shared_input(engines, [5] * n, frac_bits=16)
            hb = shared_input(engines, [9] * n, frac_bits=16, seed=3)
            run_parties(engines, lambda e: e.greater_equal(ha[e.party], hb[e.party]))
            counts.append(engines[1].counter.total)
        assert len(set(counts)) == 1

    def test_phase_attribution(self):
        engines = session()
        ha = shared_input(engines, [3] * 4)
        hb = shared_input(engines, [4] * 4, seed=2)

        def program(eng):
            with eng.phase("fe"):
                m = eng.mul(ha[eng.party], hb[eng.party])
            with eng.phase("inference"):
                eng.mul(m, m)
                eng.mul(m, m)
            return None

        run_parties(engines, program)
        assert engines[1].counter.by_phase == {"fe": 1, "inference": 2}


class TestTrunc:
    def test_trunc_oracle_bulk(self):
        engines = session()
        rng = np.random.default_rng(11)
        n = bulk(10_000)
        k = 16
        mag = 40
        raw = rng.integers(-(1 << (mag - 1)), 1 << (mag - 1), n)
        vals = [int(v) % F61.p for v in raw]
        ha = shared_input(engines, vals, frac_bits=2 * 16)

        def program(eng):
            return eng.debug_open(eng.trunc(ha[eng.party], k, mag_bits=mag))

        got = signed(opened(engines, program))
        floors = [int(v) >> k for v in raw.tolist()]
        errs = [g - f for g, f in zip(got, floors)]
        assert max(abs(e) for e in errs) <= 1
        # The rounding is probabilistic; both directions should occur.
        assert any(e == 1 for e in errs)

    def test_trunc_fixed_point_product(self):
        engines = session()
        a = C61.encode(1.5)
        b = C61.encode(2.0)
        ha = shared_input(engines, [a])
        hb = shared_input(engines, [b], seed=2)

        def program(eng):
            prod = eng.mul(ha[eng.party], hb[eng.party])
            return eng.debug_open(eng.trunc(prod, C61.frac_bits))

        got = opened(engines, program)
        assert abs(C61.decode(int(got[0])) - 3.0) <= 2 / (1 << C61.frac_bits)

    def test_mul_public_negative(self):
        engines = session()
        ha = shared_input(engines, [C61.encode(5.0)])
        w = C61.encode(-0.5)

        def program(eng):
            prod = eng.mul_public(ha[eng.party], w, raw_frac_bits=C61.frac_bits)
            return eng.debug_open(eng.trunc(prod, C61.frac_bits))

        got = opened(engines, program)
        assert abs(C61.decode(int(got[0])) - (-2.5)) <= 2 / (1 << C61.frac_bits)

    def test_trunc_range_overflow_rejected(self):
        engines = session()
        ha = shared_input(engines, [1])
        with pytest.raises(ProtocolError, match="range overflow"):
            run_parties(engines, lambda e: e.trunc(ha[e.party], 16, mag_bits=55))


class TestCompare:
    def test_ge_oracle_bulk(self):
        engines = session()
        rng = np.random.default_rng(13)
        n = bulk(10_000)
        lim = 1 << 34  # raw comparisons must stay under 2^m = 2^36 apart
        a_raw = rng.integers(-lim, lim, n)
        b_raw = rng.integers(-lim, lim, n)
        # Force exact ties into the batch.
        b_raw[: n // 20] = a_raw[: n // 20]
        ha = shared_input(engines, [int(v) % F61.p for v in a_raw], frac_bits=16)
        hb = shared_input(engines, [int(v) % F61.p for v in b_raw],
                          frac_bits=16, seed=21)

        def program(eng):
            return eng.debug_open(eng.greater_equal(ha[eng.party], hb[eng.party]))

        got = opened(engines, program)
        want = (a_raw >= b_raw).astype(int)
        assert got.tolist() == want.tolist()

    def test_ge_reflexive(self):
        engines = session()
        vals = [0, 1, C61.encode(3.25), F61.p - 5]
        ha = shared_input(engines, vals, frac_bits=16)
        hb = shared_input(engines, vals, frac_bits=16, seed=2)

        def program(eng):
            return eng.debug_open(eng.greater_equal(ha[eng.party], hb[eng.party]))

        assert opened(engines, program).tolist() == [1, 1, 1, 1]

    def test_ge_against_public_threshold(self):
        engines = session()
        vals = [C61.encode(x) for x in (0.5, 2.0, 2.5, 7.75)]
        ha = shared_input(engines, vals, frac_bits=16)
        thr = C61.encode(2.5)

        def program(eng):
            return eng.debug_open(eng.greater_equal(ha[eng.party], public=thr))

        assert opened(engines, program).tolist() == [0, 0, 1, 1]

    def test_select(self):
        engines = session()
        ha = shared_input(engines, [100, 200])
        hb = shared_input(engines, [1, 2], seed=2)
        hbit = shared_input(engines, [1, 0], seed=3)

        def program(eng):
            return eng.debug_open(
                eng.select(hbit[eng.party], ha[eng.party], hb[eng.party]))

        assert opened(engines, program).tolist() == [100, 2]


class TestMinMax:
    def test_window_min_max_oracle(self):
        rng = np.random.default_rng(23)
        for n in (2, 3, 8, 24):
            engines = session(seed=n)
            xs = rng.uniform(-14.0, 14.0, n)
            vals = [C61.encode(float(x)) for x in xs]
            ha = shared_input(engines, vals, frac_bits=16)

            def program(eng):
                lo, hi = eng.window_min_max(ha[eng.party])
                return eng.debug_open(eng.concat([lo, hi]))

            got = opened(engines, program)
            lo = C61.decode(int(got[0]))
            hi = C61.decode(int(got[1]))
            assert lo == pytest.approx(float(xs.min()), abs=1e-4)
            assert hi == pytest.approx(float(xs.max()), abs=1e-4)

    def test_single_element(self):
        engines = session()
        ha = shared_input(engines, [C61.encode(4.5)], frac_bits=16)

        def program(eng):
            lo, hi = eng.window_min_max(ha[eng.party])
            return eng.debug_open(eng.concat([lo, hi]))

        got = opened(engines, program)
        assert C61.decode(int(got[0])) == pytest.approx(4.5)
        assert C61.decode(int(got[1])) == pytest.approx(4.5)


class TestSqrt:
    def test_sqrt_relative_error(self):
        engines = session(timeout=120.0)
        rng = np.random.default_rng(29)
        n = bulk(2_000)
        xs = np.concatenate([
            rng.uniform(0.1, 1.0, n // 4),
            rng.uniform(1.0, 16.0, n // 4),
            rng.uniform(16.0, 192.0, n // 4),
            rng.uniform(192.0, 4000.0, n - 3 * (n // 4)),
        ])
        vals = [C61.encode(float(x)) for x in xs]
        ha = shared_input(engines, vals, frac_bits=16)

        def program(eng):
            out = eng.secure_sqrt(ha[eng.party])
            assert out.frac_bits == C61.frac_bits
            return eng.debug_open(out)

        got = opened(engines, program)
        approx = np.array([C61.decode(int(v)) for v in got])
        rel = np.abs(approx - np.sqrt(xs)) / np.sqrt(xs)
        assert float(rel.max()) <= 2.0 ** -8

    def test_sqrt_exact_corners(self):
        engines = session()
        xs = [1.0, 4.0, 16.0, 100.0, 192.0]
        ha = shared_input(engines, [C61.encode(x) for x in xs], frac_bits=16)

        def program(eng):
            return eng.debug_open(eng.secure_sqrt(ha[eng.party]))

        got = opened(engines, program)
        for x, v in zip(xs, got):
            assert C61.decode(int(v)) == pytest.approx(x ** 0.5, rel=2.0 ** -10)


class TestRandomness:
    def test_rand_element_uniform_small_field(self):
        # Chi-square over F97 with ~103 expected per bucket. The 0.999
        # quantile for 96 degrees of freedom is about 145; use 160 for slack.
        engines = small_field_session(seed=31)
        n = 10_000

        def program(eng):
            return eng.debug_open(eng.rand_element(n))

        got = opened(engines, program)
        counts = np.bincount(np.asarray(got, dtype=np.int64), minlength=97)
        expected = n / 97
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 160.0

    def test_rand_bits_unbiased_and_boolean(self):
        engines = session()
        n = bulk(4_000)

        def program(eng):
            b = eng.rand_bits(n)
            # b*(b-1) must vanish if every output is a true bit.
            chk = eng.mul(b, eng.add_public(b, F61.p - 1))
            return eng.debug_open(eng.concat([b, chk]))

        got = opened(engines, program)
        bits = got[:n]
        chk = got[n:]
        assert set(np.unique(bits).tolist()) <= {0, 1}
        assert np.all(chk == 0)
        mean = float(bits.mean())
        assert 0.47 <= mean <= 0.53

    def test_rand_bits_small_field(self):
        # F97 squares hit zero now and then; survivors must still be bits.
        engines = small_field_session(seed=37)

        def program(eng):
            return eng.debug_open(eng.rand_bits(300))

        got = opened(engines, program)
        assert set(np.unique(got).tolist()) <= {0, 1}
        assert 0.35 <= float(got.mean()) <= 0.65


class TestDegreeSafety:
    def test_shares_stay_degree_d_after_each_op(self):
        engines = session()
        ha = shared_input(engines, [C61.encode(2.25)] * 4, frac_bits=16)
        hb = shared_input(engines, [C61.encode(1.5)] * 4, frac_bits=16, seed=2)

        def program(eng):
            m = eng.mul(ha[eng.party], hb[eng.party])
            t = eng.trunc(m, 16)
            g = eng.greater_equal(t, hb[eng.party])
            r = eng.rand_bits(4)
            return {h.slot: eng._vals(h) for h in (m, t, g, r)}

        res = run_parties(engines, program)
        # Any 2-of-3 subset must reconstruct identical values per slot.
        for slot in res[1]:
            openings = []
            for pair in ((1, 2), (1, 3), (2, 3)):
                ws = lagrange_weights(pair, F61)
                rec = F61.vlincomb(ws, [res[pair[0]][slot], res[pair[1]][slot]])
                openings.append(rec.tolist())
            assert openings[0] == openings[1] == openings[2]


class TestOpeningPolicy:
    def test_production_refuses_unmarked_open(self):
        hub = InMemoryHub()
        engines, _ = make_local_session(F61, C61, POLICY, hub,
                                        mode=MODE_PRODUCTION, seed=41)
        ha = shared_input(engines, [5])
        with pytest.raises(PolicyError, match="not marked"):
            run_parties(engines, lambda e: e.open_output(ha[e.party]))

    def test_production_opens_marked_output(self):
        hub = InMemoryHub()
        engines, _ = make_local_session(F61, C61, POLICY, hub,
                                        mode=MODE_PRODUCTION, seed=41)
        ha = shared_input(engines, [5])

        def program(eng):
            h = ha[eng.party]
            eng.mark_output(h)
            return eng.open_output(h)

        assert opened(engines, program).tolist() == [5]

    def test_debug_open_requires_debug_mode(self):
        hub = InMemoryHub()
        engines, _ = make_local_session(F61, C61, POLICY, hub,
                                        mode=MODE_PRODUCTION, seed=41)
        ha = shared_input(engines, [5])
        with pytest.raises(PolicyError, match="debug"):
            run_parties(engines, lambda e: e.debug_open(ha[e.party]))

    def test_openings_are_classified(self):
        engines = session()
        ha = shared_input(engines, [C61.encode(2.0)] * 3, frac_bits=16)

        def program(eng):
            t = eng.trunc(eng.mul(ha[eng.party], ha[eng.party]), 16)
            eng.mark_output(t)
            eng.open_output(t)
            return [o["kind"] for o in eng.openings]

        res = run_parties(engines, program)
        kinds = res[1]
        assert kinds.count("output") == 1
        assert kinds[-1] == "output"
        assert all(k == "masked" for k in kinds[:-1])


class TestScaleTracking:
    def test_mul_adds_scales_and_trunc_subtracts(self):
        engines = session()
        ha = shared_input(engines, [C61.encode(2.0)], frac_bits=16)

        def program(eng):
            m = eng.mul(ha[eng.party], ha[eng.party])
            assert m.frac_bits == 32
            t = eng.trunc(m, 16)
            assert t.frac_bits == 16
            return None

        run_parties(engines, program)

    def test_scale_mismatch_rejected(self):
        engines = session()
        ha = shared_input(engines, [1], frac_bits=16)
        hb = shared_input(engines, [1], frac_bits=32, seed=2)
        with pytest.raises(ProtocolError, match="scale mismatch"):
            run_parties(engines, lambda e: e.add(ha[e.party], hb[e.party]))
