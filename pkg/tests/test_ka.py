import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from kaminor.exterior import mc
from kaminor.ka import (
    BoundaryPointError,
    KAEmbedding,
    OuterFunction,
    PlateauCollisionError,
    TargetFunction,
    build_embedding,
    build_staircase,
    check_distinct_plateaus,
    default_eval_grid,
    embedding_jacobian,
    empirical_modulus,
    good_families,
    outer_iteration_step,
    represent,
    represented,
    resolution_floor,
)


def random_interior_points(emb, n, seed, margin=1e-6):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x = rng.uniform(0, 1, 2)
        if emb.distance_to_break(x) > margin:
            out.append(x)
    return np.array(out)


class TestStaircase:
    def test_validation(self):
        with pytest.raises(ValueError):
            build_staircase(5, 8, 0.1)
        with pytest.raises(ValueError):
            build_staircase(0, 1, 0.1)
        with pytest.raises(ValueError):
            build_staircase(0, 8, 0.3)
        with pytest.raises(ValueError):
            build_staircase(0, 8, 0.0)

    @pytest.mark.parametrize("k", range(5))
    def test_plateaus_are_flat(self, k):
        s = build_staircase(k, 8, 0.2)
        for i in s.plateau_indices:
            lo, hi = s.plateau_interval(int(i))
            if hi <= lo:
                continue
            xs = np.linspace(lo, hi, 17)
            np.testing.assert_allclose(s(xs), s.plateau_value(i), rtol=0, atol=1e-15)
            assert np.all(s.derivative(xs[1:-1]) == 0.0)

    def test_ramp_slope_and_continuity(self):
        s = build_staircase(2, 6, 0.2)
        assert s.ramp_slope() == 5.0
        eps = 1e-9
        for lo, hi in s.gap_intervals():
            mid = 0.5 * (lo + hi)
            assert s.derivative(mid) == 5.0
            for b in (lo, hi):
                assert abs(float(s(b + eps)) - float(s(b - eps))) < 1e-7

    def test_monotone(self):
        s = build_staircase(3, 7, 0.1)
        xs = np.linspace(0, 1, 5001)
        assert np.all(np.diff(s(xs)) >= -1e-15)

    def test_gaps_disjoint_exact(self):
        # exact rational gap endpoints for gamma = 1/5; distinct families may touch but never overlap
        level, gamma = 8, Fraction(1, 5)
        sigma = Fraction(1, level)
        gaps = []
        for k in range(5):
            s = build_staircase(k, level, float(gamma))
            exact = []
            for i in range(level + 1):
                lo = Fraction(k, 5) * sigma + i * sigma
                hi = lo + gamma * sigma
                if lo < 1 and hi > 0:
                    exact.append((lo, hi))
            assert len(exact) == len(s.gap_intervals())
            for (a, b), (fa, fb) in zip(exact, s.gap_intervals()):
                assert float(a) == pytest.approx(fa, abs=1e-15)
                assert float(b) == pytest.approx(fb, abs=1e-15)
            gaps += [(a, b, k) for a, b in exact]
        for (a, b, k), (c, d, m) in itertools.combinations(gaps, 2):
            if k != m:
                assert b <= c or d <= a


class TestEmbedding:
    def test_shape_and_dims(self):
        emb = build_embedding(8, 0.2)
        assert (emb.n, emb.m) == (2, 5)
        assert emb(np.zeros((4, 3, 2))).shape == (4, 3, 5)

    def test_at_most_one_gap_per_axis(self):
        emb = build_embedding(8, 0.2)
        xs = np.linspace(0, 1, 8 * 100 + 1)
        in_gap = np.stack([s.in_gap(xs) for s in emb.staircases])
        assert in_gap.sum(axis=0).max() <= 1

    def test_grid_scan_min_good(self):
        emb = build_embedding(4, 0.2)
        g = np.linspace(0, 1, 4 * 100 + 1)
        X = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
        counts = emb.good_mask(X).sum(axis=-1)
        assert counts.min() == 3
        assert counts.max() == 5

    def test_lipschitz_bound(self):
        emb = build_embedding(8, 0.2)
        rng = np.random.default_rng(0)
        A = rng.uniform(0, 1, (2000, 2))
        B = np.clip(A + rng.uniform(-0.02, 0.02, A.shape), 0, 1)
        num = np.abs(emb(A) - emb(B)).max(axis=-1)
        den = np.abs(A - B).max(axis=-1)
        ok = den > 0
        assert np.all(num[ok] / den[ok] <= emb.lipschitz_bound() + 1e-9)
        assert emb.lipschitz_bound() == pytest.approx((1 + math.sqrt(2)) * 5)

    def test_distinct_plateaus_default(self):
        for level in range(2, 7):
            assert check_distinct_plateaus(build_embedding(level, 0.2)) > 0

    def test_equal_weights_collide(self):
        emb = build_embedding(2, 0.2, lambdas=(1.0, 1.0))
        with pytest.raises(PlateauCollisionError):
            check_distinct_plateaus(emb)
        # the collision is the swap symmetry: cell (i, j) and cell (j, i)
        V = emb.cell_values(0)
        found = [(i, j) for i in range(V.shape[0]) for j in range(i + 1, V.shape[0]) if V[i, j] == V[j, i]]
        assert found

    def test_round_trip(self):
        emb = build_embedding(5, 0.1)
        back = KAEmbedding.from_dict(emb.to_dict())
        assert (back.level, back.gamma, back.lambdas) == (emb.level, emb.gamma, emb.lambdas)
        d = emb.to_dict()
        d["families"][0]["plateauValues"][0] += 1.0
        with pytest.raises(ValueError):
            KAEmbedding.from_dict(d)


class TestJacobian:
    def test_zero_columns_and_sparsity(self):
        emb = build_embedding(8, 0.2)
        for x in random_interior_points(emb, 500, 1):
            J = embedding_jacobian(emb, x)
            zero_cols = int(np.sum(np.all(J == 0.0, axis=0)))
            assert zero_cols >= 3
            assert set(np.flatnonzero(np.all(J == 0.0, axis=0))) >= good_families(emb, x)
            assert mc(J, 2) in (1.0, None)

    def test_matches_finite_differences(self):
        emb = build_embedding(8, 0.2)
        h = 1e-7
        for x in random_interior_points(emb, 1000, 2):
            J = embedding_jacobian(emb, x)
            fd = np.stack([(emb(x + h * e) - emb(x - h * e)) / (2 * h) for e in np.eye(2)])
            np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-6)

    def test_boundary_rejected(self):
        emb = build_embedding(8, 0.2)
        lo, _ = emb.staircases[1].gap_intervals()[2]
        with pytest.raises(BoundaryPointError):
            embedding_jacobian(emb, [lo, 0.5])
        with pytest.raises(ValueError):
            embedding_jacobian(emb, [1.5, 0.5])


class TestGoodFamilies:
    def test_point_in_two_gaps(self):
        emb = build_embedding(8, 0.2)
        # x in the ramp of family 0 (0.125, 0.15), y in the ramp of family 2 (0.175, 0.2)
        assert good_families(emb, [0.13, 0.18]) == {1, 3, 4}

    def test_small_gamma_all_good(self):
        emb = build_embedding(8, 0.01)
        assert good_families(emb, [0.3, 0.61]) == {0, 1, 2, 3, 4}

    def test_same_family_both_axes(self):
        emb = build_embedding(8, 0.2)
        assert good_families(emb, [0.13, 0.135]) == {1, 2, 3, 4}


class TestTargets:
    def test_catalog_and_aliases(self):
        assert TargetFunction.catalog("x*y")(0.5, 0.4) == pytest.approx(0.2)
        assert TargetFunction.catalog("x+y").kind == "sum"
        with pytest.raises(ValueError):
            TargetFunction.catalog("exp")

    def test_grid_interpolation_exact_for_bilinear(self):
        g = np.linspace(0, 1, 5)
        f = TargetFunction.from_grid(np.add.outer(g, 2 * g))
        assert f(0.33, 0.71) == pytest.approx(0.33 + 1.42)

    def test_sum_floor(self):
        emb = build_embedding(16, 0.01)
        assert resolution_floor(TargetFunction.catalog("sum"), emb) == pytest.approx(4 * emb.sigma)
        assert resolution_floor(TargetFunction.catalog("constant", 3.0), emb) == 0.0

    def test_sin_modulus_closed_form(self):
        f = TargetFunction.catalog("sinprod")
        for delta in (1 / 16, 1 / 8, 0.3):
            brute = empirical_modulus(f, delta, resolution=960)
            assert f.modulus(delta) == pytest.approx(brute, rel=1e-3)

    def test_product_modulus_closed_form(self):
        f = TargetFunction.catalog("product")
        for delta in (1 / 16, 0.25):
            assert f.modulus(delta) == pytest.approx(empirical_modulus(f, delta), rel=1e-3)

    def test_grid_floor_near_catalog(self):
        emb = build_embedding(16, 0.01)
        g = np.linspace(0, 1, 129)
        table = np.outer(np.sin(np.pi * g), np.sin(np.pi * g))
        grid_floor = resolution_floor(TargetFunction.from_grid(table), emb)
        exact = resolution_floor(TargetFunction.catalog("sinprod"), emb)
        assert abs(grid_floor - exact) <= 0.1 * exact


class TestOuterIteration:
    def test_outer_function_validation(self):
        with pytest.raises(ValueError):
            OuterFunction([0.0, 0.0], [1.0, 2.0])
        g = OuterFunction([0.0, 1.0], [0.0, 2.0])
        assert g(-5.0) == 0.0 and g(5.0) == 2.0 and g(0.25) == 0.5
        assert OuterFunction.from_dict(g.to_dict())(0.5) == 1.0

    def test_zero_is_fixed_point(self):
        emb = build_embedding(4, 0.1)
        f = TargetFunction.catalog("zero")
        t = np.sort(emb.cells["value"])
        g1, res = outer_iteration_step(emb, OuterFunction.zero(t), f)
        assert not g1.values.any() and not res.any()

    def test_constant_one_step(self):
        emb = build_embedding(8, 0.01)
        f = TargetFunction.catalog("constant")
        t = np.sort(emb.cells["value"])
        _, res = outer_iteration_step(emb, OuterFunction.zero(t), f)
        assert np.abs(res).max() <= 2 / 3 + 1e-12

    def test_product_first_step_decreases(self):
        emb = build_embedding(8, 0.01)
        f = TargetFunction.catalog("product")
        grid = default_eval_grid(emb)
        g0 = OuterFunction.zero(np.sort(emb.cells["value"]))
        e0 = np.abs(f(grid[:, 0], grid[:, 1]) - represented(emb, g0, grid)).max()
        _, res = outer_iteration_step(emb, g0, f)
        assert np.abs(res).max() < e0

    def test_represent_constant_geometric(self):
        emb = build_embedding(8, 0.01)
        _, rep = represent(emb, TargetFunction.catalog("constant"), max_iterations=10)
        np.testing.assert_allclose(rep.ratios, [2 / 3] * 10, rtol=1e-9)
        assert not rep.reached_floor and rep.alarms == []

    def test_represent_zero_terminates(self):
        _, rep = represent(build_embedding(4, 0.1), TargetFunction.catalog("zero"))
        assert rep.errors == [0.0] and rep.iterations == 0 and rep.reached_floor

    def test_report_round_trip(self):
        _, rep = represent(build_embedding(8, 0.01), TargetFunction.catalog("product"))
        back = type(rep).from_csv(rep.to_csv(), rep.floor)
        assert back.errors == rep.errors
        assert rep.to_dict()["floorIteration"] == rep.floor_iteration

    @pytest.mark.parametrize("level", [8, 16])
    @pytest.mark.parametrize("name", ["sum", "product", "sinprod"])
    def test_contraction_band(self, level, name):
        emb = build_embedding(level, 0.01)
        _, rep = represent(emb, TargetFunction.catalog(name))
        assert rep.reached_floor and rep.alarms == []
        for e, r in zip(rep.errors, rep.ratios):
            if e > rep.floor:
                assert 1 / 3 <= r <= 0.9

    def test_wide_ramps_stall(self):
        # with gamma = 1/5 the neighbouring ramps spoil the cell averages and the error stalls above the floor
        emb = build_embedding(16, 0.2)
        _, rep = represent(emb, TargetFunction.catalog("sum"))
        assert not rep.reached_floor
