import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from sadp.accountant import (
    DEFAULT_ORDERS,
    PrivacyLedger,
    step_rdp,
    subsampled_step_rdp,
)

from oracles import gaussian_rdp, rdp_to_eps

LN = math.log(1e5)


def _quad_subsampled(sigma, alpha, q):
    """log E_{z~N(0,s^2)} [((1-q) + q * N(z;1,s^2)/N(z;0,s^2))^alpha] / (alpha-1), by quadrature."""
    def integrand(z):
        log_ratio = (2 * z - 1) / (2 * sigma**2)
        log_mix = np.logaddexp(math.log1p(-q), math.log(q) + log_ratio)
        return math.exp(stats.norm.logpdf(z, 0, sigma) + alpha * log_mix)

    hi = 12 * sigma + alpha
    val, _ = integrate.quad(integrand, -12 * sigma, hi, epsabs=0, epsrel=1e-12, limit=1000, points=[0.5, 1.0])
    return math.log(val) / (alpha - 1)


class TestStep:
    @pytest.mark.parametrize("s,a,want", [(2, 32, 4.0), (3, 32, 32 / 18), (1, 2, 1.0)])
    def test_closed_form(self, s, a, want):
        assert step_rdp(s, a) == pytest.approx(want, abs=1e-12)

    def test_zero_sigma(self):
        assert step_rdp(0.0, 32) == math.inf

    def test_bad_order(self):
        with pytest.raises(ValueError):
            step_rdp(1.0, 1.0)

    @given(st.floats(0.3, 20), st.integers(2, 64))
    def test_matches_oracle(self, s, a):
        assert step_rdp(s, a) == pytest.approx(gaussian_rdp(s, a), rel=1e-14)


class TestSubsampled:
    @pytest.mark.parametrize("sigma,alpha,q", [(2.0, 2, 0.1), (2.0, 8, 0.1), (3.0, 32, 0.1), (1.5, 5, 0.3), (4.0, 16, 0.01)])
    def test_matches_quadrature(self, sigma, alpha, q):
        got = subsampled_step_rdp(sigma, alpha, q)
        want = min(_quad_subsampled(sigma, alpha, q), alpha / (2 * sigma**2))
        assert got == pytest.approx(want, rel=1e-7)

    def test_full_batch_equals_plain(self):
        assert subsampled_step_rdp(2.0, 32, 1.0) == 4.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.8, 10), st.integers(2, 64), st.floats(0.001, 1.0))
    def test_never_above_plain(self, s, a, q):
        assert subsampled_step_rdp(s, a, q) <= step_rdp(s, a) * (1 + 1e-12)

    def test_monotone_in_q(self):
        vals = [subsampled_step_rdp(2.0, 16, q) for q in (0.01, 0.05, 0.1, 0.5)]
        assert vals == sorted(vals)

    def test_non_integer_order(self):
        with pytest.raises(ValueError):
            subsampled_step_rdp(2.0, 2.5, 0.1)


class TestLedger:
    def test_three_steps(self):
        led = PrivacyLedger(orders=(32,))
        for _ in range(3):
            led.record_step([3.0])
        assert led.total_at(32) == pytest.approx(16 / 3, abs=1e-12)
        assert led.convert().epsilon == pytest.approx(16 / 3 + LN / 31, abs=1e-9)

    def test_one_step_grid_32(self):
        led = PrivacyLedger(orders=(32,))
        led.record_step([2.0])
        assert led.convert().epsilon == pytest.approx(4.0 + LN / 31, abs=1e-9)
        assert 4.0 + LN / 31 == pytest.approx(4.3714, abs=1e-4)

    def test_worst_case_tier(self):
        led = PrivacyLedger()
        rec = led.record_step([0.0, 3.0, 2.0])
        assert rec.sigma == 2.0

    def test_zero_steps(self):
        led = PrivacyLedger()
        assert (led.totals == 0).all()
        assert led.convert().epsilon == 0.0

    def test_orders_include_32(self):
        assert 32.0 in PrivacyLedger(orders=(2, 4)).orders
        assert PrivacyLedger().orders == tuple(float(a) for a in DEFAULT_ORDERS)

    def test_non_private(self, caplog):
        caplog.set_level(logging.WARNING, logger="sadp")
        led = PrivacyLedger()
        led.record_step([2.0])
        led.record_step([])
        led.record_step([0.0])
        conv = led.convert()
        assert conv.epsilon == math.inf and not conv.private
        assert "2 of 3" in conv.explanation
        assert sum("no noise" in r.message for r in caplog.records) == 1

    def test_grid_min_dominance(self):
        led = PrivacyLedger()
        for _ in range(5):
            led.record_step([2.0])
        conv = led.convert()
        assert conv.epsilon <= conv.epsilon_at_32
        assert conv.epsilon == pytest.approx(rdp_to_eps(dict(zip(led.orders, led.totals)), 1e-5))
        assert led.convert(orders=(32,)).epsilon == pytest.approx(conv.epsilon_at_32)

    @pytest.mark.parametrize("kw", [{"delta": 0.0}, {"delta": 1.0}, {"orders": (1.0, 2.0)}, {"q": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PrivacyLedger(**kw)

    def test_json_round_trip(self, tmp_path):
        led = PrivacyLedger(q=0.1, amplify_subsampling=True)
        for s in (2.0, 3.0, 2.0):
            led.record_step([s])
        led.dump(tmp_path / "l.json")
        obj = json.loads((tmp_path / "l.json").read_text())
        assert set(obj) >= {"orders", "totals", "steps", "delta", "epsilon", "argmin_order", "epsilon_at_32"}
        again = PrivacyLedger.load(tmp_path / "l.json")
        np.testing.assert_allclose(again.totals, led.totals, rtol=1e-15)
        assert again.steps == led.steps

    def test_infinite_written_as_null(self):
        led = PrivacyLedger()
        led.record_step([])
        obj = led.to_json()
        assert obj["epsilon"] is None and obj["totals"][0] is None
        json.dumps(obj, allow_nan=False)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from([2.0, 3.0, 5.0]), min_size=1, max_size=20))
    def test_composition_and_monotonicity(self, sigmas):
        led = PrivacyLedger()
        prev_tot = led.totals.copy()
        prev_eps = 0.0
        for s in sigmas:
            led.record_step([s])
            assert (led.totals >= prev_tot).all()
            eps = led.convert().epsilon
            assert eps >= prev_eps
            prev_tot, prev_eps = led.totals.copy(), eps
        want = sum(np.array(led.orders) / (2 * s * s) for s in sigmas)
        np.testing.assert_allclose(led.totals, want, rtol=1e-12)

    @given(st.integers(1, 50), st.floats(0.5, 10))
    def test_additive(self, t, s):
        led = PrivacyLedger()
        for _ in range(t):
            led.record_step([s])
        np.testing.assert_allclose(led.totals, t * np.array([step_rdp(s, a) for a in led.orders]), rtol=1e-12)
