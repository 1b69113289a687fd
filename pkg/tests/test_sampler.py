import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mross import (CaseSpec, InclusionRule, LabeledPoint, LossSpec, ProjectionBasis, RegionTag, classify_region,
                   eta_threshold, fit_pilot, from_arrays, gen_case, inclusion_probability, sampling_weight, scan)
from mross.data import split_head, substream
from mross.sampler import (block_weights, estimate_normalizer, raw_weights, read_spill, region_codes,
                           truncation_level, write_spill)
from mross.solver import PilotFit

from conftest import small_data

LOGISTIC = LossSpec.logistic()


def fake_pilot(theta, X=None, y=None, hessian=None):
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    if X is None:
        X = np.hstack([np.ones((10 * d, 1)), np.zeros((10 * d, d - 1))])
        y = np.ones(10 * d)
    return PilotFit(theta, np.eye(d) if hessian is None else hessian, X, y)


@pytest.fixture(scope="module")
def case1():
    stream = gen_case(CaseSpec(1, 20_000, 21, seed=1)).materialize()
    Xp, yp, _ = split_head(stream.blocks(), 500)
    return stream, fit_pilot(LOGISTIC, Xp, yp)


class TestRegions:
    def test_boundary_is_s(self):
        pilot = fake_pilot([1.0, 0.0])
        assert classify_region(pilot, 1.0, LabeledPoint([1, 5], 1)) is RegionTag.S
        assert classify_region(pilot, 0.5, LabeledPoint([1, 5], 1)) is RegionTag.PLUS

    def test_label_must_match(self):
        pilot = fake_pilot([2.0, 0.0])
        assert classify_region(pilot, 1.0, LabeledPoint([1, 0], -1)) is RegionTag.S
        pilot = fake_pilot([-2.0, 0.0])
        assert classify_region(pilot, 1.0, LabeledPoint([1, 0], -1)) is RegionTag.MINUS
        assert classify_region(pilot, 1.0, LabeledPoint([1, 0], 1)) is RegionTag.S

    def test_infinite_threshold(self):
        pilot = fake_pilot([1e300, 0.0])
        assert classify_region(pilot, math.inf, LabeledPoint([1, 0], 1)) is RegionTag.S

    def test_non_positive_threshold(self):
        with pytest.raises(ValueError):
            classify_region(fake_pilot([0.0, 0.0]), 0.0, LabeledPoint([1, 0], 1))
        with pytest.raises(ValueError):
            InclusionRule("lopt", 10, 0.0)


class TestWeights:
    def test_lopt_at_zero(self):
        rule = InclusionRule("lopt", 10)
        for y in (1, -1):
            assert sampling_weight(rule, LOGISTIC, fake_pilot([0, 0]), LabeledPoint([1, 0], y)) == 0.5

    def test_uniform(self):
        rule = InclusionRule("uniform", 10)
        assert sampling_weight(rule, LOGISTIC, fake_pilot([3, 1]), LabeledPoint([1, 7], -1)) == 1.0

    def test_aopt_half_of_lopt_for_2i(self):
        pilot = fake_pilot([0.3, -0.2, 0.1], hessian=2 * np.eye(3))
        p = LabeledPoint([1, 2, -1], 1)
        a = sampling_weight(InclusionRule("aopt", 10), LOGISTIC, pilot, p)
        b = sampling_weight(InclusionRule("lopt", 10), LOGISTIC, pilot, p)
        assert a == pytest.approx(b / 2, rel=1e-14)

    def test_aopt_singular_hessian(self):
        pilot = fake_pilot([0, 0], hessian=np.zeros((2, 2)))
        with pytest.raises(np.linalg.LinAlgError):
            sampling_weight(InclusionRule("aopt", 10), LOGISTIC, pilot, LabeledPoint([1, 0], 1))

    def test_truncation_caps(self):
        rule = InclusionRule("lopt", 10, truncation_M=0.1)
        assert sampling_weight(rule, LOGISTIC, fake_pilot([0, 0]), LabeledPoint([1, 0], 1)) == 0.1

    def test_truncation_level_is_pilot_quantile(self, case1):
        _, pilot = case1
        rule = InclusionRule("lopt", 100, 4.0)
        s = region_codes(pilot.theta, 4.0, pilot.X, pilot.y) == 0
        w = raw_weights(rule, LOGISTIC, pilot, pilot.X[s], pilot.y[s])
        assert truncation_level(rule, LOGISTIC, pilot) == np.quantile(w, 0.95)


class TestNormalizer:
    def test_equal_weights(self):
        pilot = fake_pilot([0, 0])
        rule = InclusionRule("lopt", 10)
        assert estimate_normalizer(pilot, rule, LOGISTIC, 1000) == pytest.approx(1000 * 0.5)

    def test_uniform_infinite_c(self, case1):
        _, pilot = case1
        assert estimate_normalizer(pilot, InclusionRule("uniform", 10), LOGISTIC, 12345) == 12345

    def test_no_pilot_point_in_s(self):
        X = np.hstack([np.ones((20, 1)), np.full((20, 1), 10.0)])
        pilot = fake_pilot([0.0, 1.0], X, np.ones(20))
        with pytest.raises(ValueError, match="increase C"):
            estimate_normalizer(pilot, InclusionRule("lopt", 10, 1.0), LOGISTIC, 100)

    def test_case1_close_to_exact_total(self):
        # exact denominator from a second full pass; 200 runs, n = 1e5, r0 = 1000
        hits = []
        for k in range(200):
            X, y = gen_case(CaseSpec(1, 100_000, 21, seed=1000 + k)).to_arrays()
            pilot = fit_pilot(LOGISTIC, X[:1000], y[:1000])
            rule = InclusionRule("lopt", 2000, eta_threshold(LOGISTIC))
            s = region_codes(pilot.theta, rule.threshold_C, X, y) == 0
            exact = raw_weights(rule, LOGISTIC, pilot, X[s], y[s]).sum()
            hits.append(abs(estimate_normalizer(pilot, rule, LOGISTIC, len(y)) / exact - 1) <= 0.10)
        assert np.mean(hits) >= 0.90


class TestInclusionProbability:
    def test_hand_example(self):
        rule = InclusionRule("lopt", 2)
        np.testing.assert_allclose(inclusion_probability(rule, [1, 2, 5], 8.0), [0.25, 0.5, 1.0])

    def test_zero_weight(self):
        assert inclusion_probability(InclusionRule("lopt", 5), 0.0, 3.0) == 0.0

    def test_uniform(self):
        rule = InclusionRule("uniform", 40)
        np.testing.assert_allclose(inclusion_probability(rule, np.ones(5), 1000), 0.04)

    def test_bad_normalizer(self):
        with pytest.raises(ValueError):
            inclusion_probability(InclusionRule("lopt", 2), [1.0], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(w=st.lists(st.floats(0, 100), min_size=1, max_size=20), c=st.floats(1e-3, 1e3), r=st.integers(1, 50))
    def test_scale_invariance(self, w, c, r):
        w = np.asarray(w)
        rule = InclusionRule("lopt", r)
        total = w.sum() + 1.0
        a = inclusion_probability(rule, w, total)
        b = inclusion_probability(rule, c * w, c * total)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-300)


def batch_summary(X, y, pilot, C, basis):
    codes = region_codes(pilot.theta, C, X, y)
    G = basis(X[codes == 0], y[codes == 0])
    return X[codes == 1].mean(0), X[codes == -1].mean(0), G.mean(0), codes


class TestScan:
    def test_requires_rng(self, case1):
        stream, pilot = case1
        with pytest.raises(ValueError, match="random generator"):
            scan(stream, pilot, InclusionRule("lopt", 100), LOGISTIC)

    def test_dimension_mismatch(self, case1):
        _, pilot = case1
        X, y = small_data(0, n=50, d=3)
        with pytest.raises(ValueError, match="dimension"):
            scan(from_arrays(X, y), pilot, InclusionRule("lopt", 10), LOGISTIC, rng=np.random.default_rng(0))

    def test_infinite_c_averages_all_points(self, case1):
        stream, pilot = case1
        basis = ProjectionBasis(pilot, LOGISTIC)
        s = scan(stream, pilot, InclusionRule("lopt", 500), LOGISTIC, basis, np.random.default_rng(0))
        X, y = stream.to_arrays()
        assert s.n_plus == s.n_minus == 0 and s.n_s == s.n_total == len(y)
        np.testing.assert_allclose(s.gbar, basis(X, y).mean(0), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("fused", [True, False])
    def test_streaming_matches_batch(self, case1, fused):
        stream, pilot = case1
        basis = ProjectionBasis(pilot, LOGISTIC)
        g_map = basis if fused else (lambda X, y: basis(X, y))
        C = 3.0
        s = scan(stream, pilot, InclusionRule("lopt", 500, C), LOGISTIC, g_map, np.random.default_rng(1))
        X, y = stream.to_arrays()
        xp, xm, gbar, codes = batch_summary(X, y, pilot, C, basis)
        np.testing.assert_allclose(s.xbar_plus, xp, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(s.xbar_minus, xm, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(s.gbar, gbar, rtol=1e-12, atol=1e-14)
        assert (s.n_plus, s.n_minus, s.n_s) == (np.sum(codes == 1), np.sum(codes == -1), np.sum(codes == 0))

    def test_all_selected_is_region_s(self, case1):
        stream, pilot = case1
        s = scan(stream, pilot, InclusionRule("uniform", 1e9, 3.0), LOGISTIC, None, np.random.default_rng(2))
        X, y = stream.to_arrays()
        codes = region_codes(pilot.theta, 3.0, X, y)
        np.testing.assert_array_equal(s.X_sub, X[codes == 0])
        np.testing.assert_array_equal(s.pi_sub, 1.0)
        assert s.realized_r == s.n_s

    def test_pi_sum_and_stored_probabilities(self, case1):
        stream, pilot = case1
        rule = InclusionRule("lopt", 800, 3.0)
        s = scan(stream, pilot, rule, LOGISTIC, None, np.random.default_rng(3))
        X, y = stream.to_arrays()
        codes = region_codes(pilot.theta, 3.0, X, y)
        w = block_weights(rule, LOGISTIC, pilot, X[codes == 0], y[codes == 0])
        assert s.weight_sum == pytest.approx(w.sum(), rel=1e-12)
        assert s.pi_sum == pytest.approx(inclusion_probability(rule, w, s.normalizer).sum(), rel=1e-12)
        assert np.all((s.pi_sub > 0) & (s.pi_sub <= 1))
        pts = s.subsample
        assert len(pts) == s.realized_r and isinstance(pts[0][0], LabeledPoint)

    def test_expected_subsample_size(self):
        # Poisson expectation: mean realized size vs budget over 200 scans
        stream = gen_case(CaseSpec(1, 10_000, 21, seed=5)).materialize()
        X, y = stream.to_arrays()
        pilot = fit_pilot(LOGISTIC, X[:1000], y[:1000])
        rule = InclusionRule("lopt", 500, eta_threshold(LOGISTIC))
        sizes = [scan(stream, pilot, rule, LOGISTIC, None, substream(9, k)).realized_r for k in range(200)]
        assert abs(np.mean(sizes) - 500) <= 3 * math.sqrt(500)

    def test_zero_weight_points_stay_in_s(self):
        # squared hinge: margins beyond 1 have zero weight yet stay in region S
        X, y = small_data(3, n=400, d=3, scale=4.0)
        loss = LossSpec.squared_hinge()
        pilot = fit_pilot(loss, X, y)
        s = scan(from_arrays(X, y), pilot, InclusionRule("lopt", 1e9), loss, None, np.random.default_rng(0))
        zero = loss.dphi(y * (X @ pilot.theta)) == 0
        assert zero.any()
        assert s.n_s == len(y)
        assert s.realized_r == len(y) - zero.sum()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), C=st.floats(0.01, 20), block=st.integers(1, 200))
    def test_partition_complete(self, seed, C, block):
        X, y = small_data(seed, n=300, d=3, scale=3.0)
        pilot = fake_pilot([0.2, 2.0, -1.0], X[:30], y[:30])
        s = scan(from_arrays(X, y, block_size=block), pilot, InclusionRule("lopt", 50, C), LOGISTIC,
                 ProjectionBasis(pilot, LOGISTIC), np.random.default_rng(seed), normalizer=100.0)
        assert s.n_plus + s.n_minus + s.n_s == s.n_total == 300

    def test_peak_memory_does_not_grow_with_n(self):
        loss = LOGISTIC
        X, y = gen_case(CaseSpec(1, 2000, 21, seed=0), role="pilot").to_arrays()
        pilot = fit_pilot(loss, X, y)
        basis = ProjectionBasis(pilot, loss)
        peaks = []
        for n in (100_000, 400_000):
            stream = gen_case(CaseSpec(1, n, 21, seed=1))
            tracemalloc.start()
            s = scan(stream, pilot, InclusionRule("lopt", 1000, 4.0), loss, basis, np.random.default_rng(0))
            peaks.append(tracemalloc.get_traced_memory()[1])
            tracemalloc.stop()
            assert s.n_total == n
        # a materialized 400k x 21 float block alone would need 67 MB
        assert peaks[1] < 1.3 * peaks[0]
        assert peaks[1] < 20 * 2**20


class TestSpill:
    def test_roundtrip(self, case1, tmp_path):
        stream, pilot = case1
        s = scan(stream, pilot, InclusionRule("lopt", 300, 3.0), LOGISTIC, None, np.random.default_rng(4))
        path = tmp_path / "sub.bin"
        write_spill(path, s)
        assert path.stat().st_size == s.realized_r * (21 + 2) * 8
        X, y, pi = read_spill(path, 21)
        np.testing.assert_array_equal(X, s.X_sub)
        np.testing.assert_array_equal(y, s.y_sub)
        np.testing.assert_array_equal(pi, s.pi_sub)

    def test_bad_size(self, tmp_path):
        path = tmp_path / "bad.bin"
        np.zeros(7).tofile(path)
        with pytest.raises(ValueError, match="multiple"):
            read_spill(path, 4)
