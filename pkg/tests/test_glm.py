import json
import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings, strategies as st

from crashlab.errors import RankDeficient, ZeroMean
from crashlab.glm import (
    DesignMatrix, build_design, fit_negative_binomial, format_risk, irr_markdown, irr_table, nb_loglike,
    nb_score, overdispersion_ratio,
)
from crashlab.ingest import impute_damage

TRUE_DARK = math.log(0.56)
TRUE_SPEED = math.log(1.005)


def _simulate(seed, n=2000, alpha=1.0, base=3.0):
    rng = np.random.default_rng(seed)
    dark = (rng.random(n) < 0.25).astype(float)
    speed = rng.uniform(15, 85, n)
    mu = base * np.exp(TRUE_DARK * dark + TRUE_SPEED * speed)
    r = 1.0 / alpha
    y = rng.negative_binomial(r, r / (r + mu)).astype(float)
    return DesignMatrix(np.column_stack([np.ones(n), dark, speed]), y, ("intercept", "dark", "speed"))


class TestOverdispersion:
    def test_examples(self):
        assert overdispersion_ratio([2, 2, 2, 2]) == 0.0
        assert overdispersion_ratio([0, 10]) == 10.0

    def test_zero_mean(self):
        with pytest.raises(ZeroMean):
            overdispersion_ratio([0, 0, 0])

    def test_synth_damage(self, corpus):
        out, _ = impute_damage(corpus)
        v = overdispersion_ratio([r.damage_usd / 1000 for r in out])
        assert 7.0 <= v <= 11.0


class TestLikelihood:
    def test_gradient_matches_finite_differences(self):
        d = _simulate(3, n=300)
        rng = np.random.default_rng(11)
        for _ in range(10):
            beta = rng.normal(0, 0.3, 3) * np.array([1, 1, 0.01]) + np.array([1.0, 0.0, 0.0])
            alpha = float(rng.uniform(0.2, 3.0))
            g = nb_score(beta, alpha, d.X, d.y)
            theta = np.append(beta, alpha)
            for k in range(4):
                step = 1e-6 * max(1.0, abs(theta[k]))
                hi, lo = theta.copy(), theta.copy()
                hi[k] += step
                lo[k] -= step
                fd = (nb_loglike(hi[:3], hi[3], d.X, d.y) - nb_loglike(lo[:3], lo[3], d.X, d.y)) / (2 * step)
                assert abs(g[k] - fd) <= 1e-6 * max(1.0, abs(fd))

    def test_matches_statsmodels_loglike(self):
        d = _simulate(4, n=200)
        beta, alpha = np.array([1.1, -0.4, 0.004]), 0.7
        model = sm.NegativeBinomial(d.y, d.X, loglike_method="nb2")
        # statsmodels takes log(alpha) as the last parameter
        ref = model.loglike(np.append(beta, math.log(alpha)))
        assert nb_loglike(beta, alpha, d.X, d.y) == pytest.approx(ref, rel=1e-10)


class TestFit:
    def test_intercept_only_is_mean(self):
        y = np.array([1.0, 3.0, 4.0, 7.0, 10.0])
        fit = fit_negative_binomial(DesignMatrix(np.ones((5, 1)), y, ("intercept",)))
        assert fit.irr[0] == pytest.approx(5.0, abs=1e-6)

    def test_constant_response_gives_null_indicator(self):
        X = np.column_stack([np.ones(6), [0, 1, 0, 1, 0, 1]])
        fit = fit_negative_binomial(DesignMatrix(X, np.full(6, 4.0), ("intercept", "dark")))
        assert fit.irr[1] == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed,n", [(5, 500), (9, 2000)])
    def test_matches_statsmodels(self, seed, n):
        d = _simulate(seed, n=n)
        fit = fit_negative_binomial(d)
        ref = sm.NegativeBinomial(d.y, d.X, loglike_method="nb2").fit(disp=0, method="newton", maxiter=200)
        assert np.allclose(fit.coef, ref.params[:3], rtol=0, atol=1e-5)
        assert fit.alpha == pytest.approx(ref.params[3], rel=1e-4)
        assert np.allclose(fit.se, ref.bse[:3], rtol=1e-3)
        assert fit.loglike == pytest.approx(ref.llf, rel=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_recovery(self, seed):
        fit = fit_negative_binomial(_simulate(seed))
        assert abs(fit.irr[1] - 0.56) <= 0.08
        assert abs(fit.irr[2] - 1.005) <= 0.003

    def test_loglike_non_decreasing(self):
        fit = fit_negative_binomial(_simulate(1, n=500))
        lls = [t[1] for t in fit.trace]
        assert all(b >= a - 1e-9 * abs(a) for a, b in zip(lls, lls[1:]))

    def test_gradient_vanishes(self):
        d = _simulate(2, n=500)
        fit = fit_negative_binomial(d)
        assert np.max(np.abs(nb_score(fit.coef, fit.alpha, d.X, d.y)[:3])) < 1e-4

    def test_rescaling_continuous_column(self):
        d = _simulate(6, n=500)
        fit = fit_negative_binomial(d)
        X2 = d.X.copy()
        X2[:, 2] *= 10.0
        fit2 = fit_negative_binomial(DesignMatrix(X2, d.y, d.columns))
        assert fit2.coef[2] == pytest.approx(fit.coef[2] / 10.0, rel=1e-5)
        assert np.allclose(fit2.ci[2] ** 10.0, fit.ci[2], rtol=1e-4)
        assert fit2.irr[1] == pytest.approx(fit.irr[1], rel=1e-6)

    def test_poisson_limit(self):
        rng = np.random.default_rng(8)
        n = 2000
        x = rng.random(n)
        X = np.column_stack([np.ones(n), x])
        y = rng.poisson(np.exp(1.0 + 0.5 * x)).astype(float)
        fit = fit_negative_binomial(DesignMatrix(X, y, ("intercept", "x")))
        pois = sm.GLM(y, X, family=sm.families.Poisson()).fit()
        assert fit.alpha < 0.05
        assert np.allclose(fit.coef, pois.params, atol=1e-3)

    def test_rank_deficient_names_columns(self):
        X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
        with pytest.raises(RankDeficient, match="b"):
            fit_negative_binomial(DesignMatrix(X, np.arange(1.0, 11.0), ("intercept", "a", "b")))

    def test_ci_brackets_irr(self):
        fit = fit_negative_binomial(_simulate(9, n=400))
        assert np.all(fit.ci[:, 0] <= fit.irr) and np.all(fit.irr <= fit.ci[:, 1])
        assert fit.alpha > 0
        obj = json.loads(fit.to_json())
        assert obj["schema_version"] == 1 and len(obj["coefficients"]) == 3


class TestPresentation:
    @pytest.mark.parametrize("irr,text", [(0.56, "-44%"), (1.005, "+0.5%"), (1.0, "0%"), (1.54, "+54%")])
    def test_format_risk(self, irr, text):
        assert format_risk(irr) == text

    def test_irr_table_on_corpus(self, corpus):
        out, _ = impute_damage(corpus)
        rows = irr_table(fit_negative_binomial(build_design(out)))
        assert [r.p_value for r in rows] == sorted(r.p_value for r in rows)
        md = irr_markdown(rows, n=163)
        assert md.startswith("| Predictor | IRR | 95% CI | p-value | Risk |") and "n = 163" in md


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.1, 50), min_size=3, max_size=30))
def test_intercept_only_property(ys):
    y = np.array(ys)
    fit = fit_negative_binomial(DesignMatrix(np.ones((y.size, 1)), y, ("intercept",)))
    assert fit.irr[0] == pytest.approx(y.mean(), rel=1e-6)
