import math
from decimal import ROUND_FLOOR, Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nalattice.lattice import (Field, MultiIndex, PrefixScanner, PrefixTable, batch_partial_sums,
                               blocking_schedule, clipped_log, geometric_subsequence, increment_max,
                               loglog_norm, partial_sums_scan, rectangle_sum)
from nalattice.oracles import brute_force_partial_sums

SMALL = Field.from_array(np.array([[1, -2], [3, 4]]))


def shapes(max_cells=500):
    return st.integers(1, 3).flatmap(
        lambda d: st.lists(st.integers(1, max(1, int(max_cells ** (1 / d)))), min_size=d, max_size=d)
    ).map(tuple)


int_fields = shapes().flatmap(lambda s: hnp.arrays(np.int64, s, elements=st.integers(-1000, 1000)))
float_fields = shapes().flatmap(
    lambda s: hnp.arrays(np.float64, s, elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))


class TestMultiIndex:
    def test_parse_and_format(self):
        k = MultiIndex.parse("32x16x2")
        assert k.coords == (32, 16, 2)
        assert str(k) == "32x16x2"
        assert k.size == 1024 and k.d == 3 and k.norm1 == 50

    @pytest.mark.parametrize("bad", ["", "0x3", "3x-1", "ax2", "3xx2"])
    def test_parse_rejects(self, bad):
        with pytest.raises(ValueError):
            MultiIndex.parse(bad)

    def test_partial_order(self):
        a, b = MultiIndex.of((1, 2)), MultiIndex.of((2, 2))
        assert a <= b and b >= a and not b <= a
        assert not MultiIndex.of((1, 3)) <= b and not b <= MultiIndex.of((1, 3))

    def test_arithmetic(self):
        assert MultiIndex.of((1, 2)) + MultiIndex.of((3, 4)) == MultiIndex.of((4, 6))
        assert MultiIndex.diagonal(5, 3) == MultiIndex.of((5, 5, 5))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            MultiIndex.of((1, 2)).le(MultiIndex.of((1, 2, 3)))


class TestField:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Field.from_array(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            Field.from_array(np.array([np.inf]))

    def test_one_based_indexing(self):
        assert SMALL[(1, 1)] == 1 and SMALL[(1, 2)] == -2 and SMALL[(2, 1)] == 3

    def test_values_are_read_only(self):
        with pytest.raises(ValueError):
            SMALL.values[0] = 5

    def test_dimension_cap(self):
        with pytest.raises(ValueError):
            partial_sums_scan(Field.from_array(np.ones((1,) * 9)))


class TestScan:
    def test_small_example(self):
        s = partial_sums_scan(SMALL)
        assert (s.total, s.max_abs, s.max_signed) == (6, 6, 6)

    def test_single_cell(self):
        s = partial_sums_scan(Field.from_array(np.array([-5.0])))
        assert (s.total, s.max_abs, s.max_signed) == (-5, 5, -5)

    @pytest.mark.parametrize("shape", [(1,), (7,), (3, 4), (2, 3, 4)])
    def test_zero_field(self, shape):
        s = partial_sums_scan(Field.from_array(np.zeros(shape)))
        assert s.total == 0 and s.max_abs == 0

    @settings(max_examples=150, deadline=None)
    @given(int_fields)
    def test_matches_brute_force_exactly_on_integers(self, arr):
        field = Field.from_array(arr)
        assert partial_sums_scan(field) == brute_force_partial_sums(field)

    @settings(max_examples=150, deadline=None)
    @given(float_fields)
    def test_matches_brute_force_on_floats(self, arr):
        field = Field.from_array(arr)
        fast, slow = partial_sums_scan(field), brute_force_partial_sums(field)
        scale = max(1.0, float(np.abs(arr).sum()))
        for key in ("total", "max_abs", "max_signed"):
            assert getattr(fast, key) == pytest.approx(getattr(slow, key), rel=1e-12, abs=1e-12 * scale)

    @settings(max_examples=60, deadline=None)
    @given(int_fields)
    def test_transpose_invariance(self, arr):
        a = partial_sums_scan(Field.from_array(arr))
        b = partial_sums_scan(Field.from_array(arr.T.copy()))
        assert (a.total, a.max_abs, a.max_signed) == (b.total, b.max_abs, b.max_signed)

    def test_compensated_summation(self):
        # naive float64 summation loses the small terms entirely
        rows = np.full((20_000, 1), 1e-8)
        rows[0, 0] = 1e8
        s = partial_sums_scan(Field.from_array(rows))
        assert s.total == pytest.approx(1e8 + 19_999e-8, rel=0, abs=1e-9)

    def test_streaming_scanner_tracks_prefix_max(self):
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((9, 7))
        scanner = PrefixScanner((7,), track_max=True)
        for row in arr:
            scanner.push(row)
        table = PrefixTable(Field.from_array(arr)).table[1:, 1:]
        assert scanner.max_plane[-1] == pytest.approx(np.abs(table).max())
        assert scanner.max_plane[3] == pytest.approx(np.abs(table[:, :4]).max())

    def test_batch_matches_scan(self):
        rng = np.random.default_rng(4)
        batch = rng.integers(-3, 4, size=(25, 4, 5, 3))
        out = batch_partial_sums(batch)
        for i, arr in enumerate(batch):
            s = partial_sums_scan(Field.from_array(arr))
            assert (out["total"][i], out["max_abs"][i], out["max_signed"][i]) == (s.total, s.max_abs, s.max_signed)

    def test_batch_int8_accumulates_wide(self):
        batch = np.ones((2, 40, 40), dtype=np.int8)
        assert batch_partial_sums(batch)["total"][0] == 1600


class TestRectangles:
    def test_examples(self):
        assert rectangle_sum(SMALL, (2, 1), (2, 2)) == 7
        assert rectangle_sum(SMALL, (1, 1), (1, 1)) == 1
        assert rectangle_sum(SMALL, (1, 1), (2, 2)) == partial_sums_scan(SMALL).total

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            rectangle_sum(SMALL, (1, 1), (3, 1))
        with pytest.raises(ValueError):
            rectangle_sum(SMALL, (2, 2), (1, 1))

    @settings(max_examples=80, deadline=None)
    @given(float_fields, st.data())
    def test_matches_direct_sum_and_is_additive(self, arr, data):
        field = Field.from_array(arr)
        table = PrefixTable(field)
        lo = tuple(data.draw(st.integers(1, n)) for n in arr.shape)
        hi = tuple(data.draw(st.integers(l, n)) for l, n in zip(lo, arr.shape))
        box = arr[tuple(slice(l - 1, h) for l, h in zip(lo, hi))]
        scale = max(1.0, float(np.abs(arr).sum()))
        assert table.rectangle_sum(lo, hi) == pytest.approx(math.fsum(box.ravel()), abs=1e-12 * scale)
        axis = data.draw(st.integers(0, arr.ndim - 1))
        if hi[axis] > lo[axis]:
            cut = data.draw(st.integers(lo[axis], hi[axis] - 1))
            left_hi = hi[:axis] + (cut,) + hi[axis + 1:]
            right_lo = lo[:axis] + (cut + 1,) + lo[axis + 1:]
            split = table.rectangle_sum(lo, left_hi) + table.rectangle_sum(right_lo, hi)
            assert split == pytest.approx(table.rectangle_sum(lo, hi), abs=1e-12 * scale)

    def test_increment_max_example(self):
        assert increment_max(SMALL, (1, 1), (1, 1)) == 5

    def test_increment_max_zero_field(self):
        assert increment_max(Field.from_array(np.zeros((4, 4))), (2, 1), (2, 3)) == 0

    def test_increment_max_brute_force(self):
        rng = np.random.default_rng(5)
        arr = rng.integers(-9, 10, size=(6, 5))
        table = PrefixTable(Field.from_array(arr))
        base, delta = (2, 1), (3, 2)
        want = max(abs(table.T((base[0] + a, base[1] + b)) - table.T(base))
                   for a in range(1, 4) for b in range(1, 3))
        assert increment_max(Field.from_array(arr), base, delta) == want


class TestLogs:
    def test_clipping(self):
        assert clipped_log(1.0) == 1.0 and clipped_log(math.e) == 1.0
        assert clipped_log(100.0) == pytest.approx(math.log(100.0))

    @pytest.mark.parametrize("n,want", [((2, 2), 4.0), ((1, 1), 2.0)])
    def test_examples(self, n, want):
        assert loglog_norm(MultiIndex.of(n)) == want

    def test_exact_log_chain(self):
        size = math.exp(math.exp(2.0))
        assert loglog_norm(size, 2) == pytest.approx(math.sqrt(2 * 2 * size * 2.0), rel=1e-12)

    def test_monotone_and_clipped_below_e_to_e(self):
        sizes = np.arange(1, 5000)
        values = loglog_norm(sizes, 3)
        assert np.all(np.diff(values) > 0)
        small = sizes <= math.exp(math.e)
        np.testing.assert_allclose(values[small], np.sqrt(6.0 * sizes[small]), rtol=1e-15)


def _decimal_floor(x: Decimal) -> int:
    return int(x.to_integral_value(rounding=ROUND_FLOOR))


class TestSchedules:
    @pytest.mark.parametrize("k,m,p,N", [(1, 2, 2, 4), (2, 4, 1, 80)])
    def test_examples(self, k, m, p, N):
        e = blocking_schedule(0.1, 2).entries[k - 1]
        assert (e.m, e.p, e.N) == (m, p, N)

    @pytest.mark.parametrize("eps", [0.05, 0.1, 0.3, 0.5, 0.9])
    def test_identities_with_decimal_oracle(self, eps):
        getcontext().prec = 80
        sched = blocking_schedule(eps, 6)
        for e in sched.entries:
            power = Decimal(2) ** (Decimal(e.k) ** (1 + Decimal(str(eps))))
            assert e.m == _decimal_floor(power)
            assert e.p == _decimal_floor(power / e.k**2)
            assert e.N == (e.m + e.p) * e.k**4
        assert sched.entries[0].m == 2
        assert all(a.N < b.N for a, b in zip(sched.entries, sched.entries[1:]))

    def test_big_blocks_tile_with_gaps(self):
        e = blocking_schedule(0.1, 2).entries[1]
        blocks = e.big_blocks()
        assert len(blocks) == 16 and blocks[0] == (1, 4) and blocks[1] == (6, 9)
        assert blocks[-1][1] + e.p == e.N

    def test_overflow_is_explicit(self):
        with pytest.raises(OverflowError):
            blocking_schedule(0.5, 40)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
    def test_epsilon_range(self, eps):
        with pytest.raises(ValueError):
            blocking_schedule(eps, 3)

    @pytest.mark.parametrize("theta,d,k,want", [
        (2, 2, 3, [(2, 2), (4, 4), (8, 8)]),
        (1.5, 1, 4, [(1,), (2,), (3,), (5,)]),
        (10, 3, 1, [(10, 10, 10)]),
    ])
    def test_geometric_subsequence(self, theta, d, k, want):
        assert [p.coords for p in geometric_subsequence(theta, d, k)] == want

    def test_subsequence_dedups_and_rejects_theta(self):
        pts = geometric_subsequence(1.1, 1, 10)
        sides = [p.coords[0] for p in pts]
        assert sides == sorted(set(sides))
        with pytest.raises(ValueError):
            geometric_subsequence(1.0, 2, 3)
