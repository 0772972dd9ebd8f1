import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocsim.ccdf import Ccdf, Grid
from cocsim.distributions import IID, ClassMix, CommonCopy, Deterministic, Exponential, HyperExponential, JobClass, Uniform
from cocsim.meanfield import (
    NonIIDError,
    Supercritical,
    evolve_ml,
    fde_residual,
    fp_consistency,
    h_all,
    h_closed_form,
    h_monte_carlo,
    integrate_fde,
    relax,
    rho_curve,
    sample_jump,
    simulate_tagged_particle,
    solve_fp_finite_frame,
    solve_fp_infinite,
)
from cocsim.analysis import levy_distance, sup_distance

from oracles import brute_h, mm1_finite_frame_x0, mm1_fixed_point


def mix_of(d, k, law, lam=0.5):
    return ClassMix.single(JobClass(d, k, IID(law, d)), lam)


EMPTY = Ccdf.empty(0.05, 201)


def state(step, size, f):
    return Ccdf.from_function(f, Grid(step, step * (size - 1)))


class TestH:
    @pytest.mark.parametrize("w", [0.0, 0.5, 1.0, 3.0])
    def test_empty_state_examples(self, w):
        assert h_closed_form(EMPTY, w, mix_of(1, 1, Exponential(1.0))) == pytest.approx(math.exp(-w), rel=1e-12)
        assert h_closed_form(EMPTY, w, mix_of(2, 1, Exponential(1.0))) == pytest.approx(2 * math.exp(-2 * w), rel=1e-12)

    def test_no_server_below_level(self):
        x = Ccdf(0.05, np.ones(101))
        assert h_closed_form(x, 2.0, mix_of(2, 1, Exponential(1.0))) == 0.0

    def test_deterministic_jump_from_empty(self):
        rng = np.random.default_rng(0)
        mix = mix_of(1, 1, Deterministic(1.0))
        for w, expected in [(0.0, 1.0), (0.5, 1.0), (0.95, 1.0), (1.0, 0.0), (2.0, 0.0)]:
            mean, se = h_monte_carlo(EMPTY, w, mix, 200, rng)
            assert mean == expected and se == 0.0

    def test_zero_weight_class_contributes_nothing(self):
        a = JobClass(2, 1, IID(Exponential(1.0), 2))
        b = JobClass(3, 1, IID(Uniform(2.0), 3))
        mixed = ClassMix((a, b), (1.0, 0.0), 0.5)
        x = state(0.05, 101, lambda w: 0.5 * np.exp(-0.5 * w))
        assert h_closed_form(x, 1.0, mixed) == h_closed_form(x, 1.0, ClassMix.single(a, 0.5))

    @pytest.mark.parametrize("mix", [mix_of(2, 1, Exponential(1.0)), mix_of(3, 2, Exponential(2.0)),
                                     mix_of(3, 1, Uniform(2.0)), mix_of(2, 1, HyperExponential((0.5, 0.5), (0.5, 2.0)))],
                             ids=["exp21", "exp32", "unif31", "hyper21"])
    def test_closed_form_matches_monte_carlo(self, mix):
        rng = np.random.default_rng(1)
        x = state(0.05, 201, lambda w: 0.6 * np.exp(-0.4 * w))
        for w in np.linspace(0, 9.5, 20):
            w = round(w / 0.05) * 0.05
            est, se = h_monte_carlo(x, w, mix, 40_000, rng)
            exact = h_closed_form(x, w, mix)
            # rare crossings can give a zero sample stderr; fall back to the Poisson scale
            se = max(se, math.sqrt(exact / 40_000))
            assert abs(exact - est) < 4 * se

    def test_closed_form_matches_timeline_oracle(self):
        # per-sample event simulation through the FCFS oracle
        rng = np.random.default_rng(2)
        x = state(0.1, 41, lambda w: 0.7 * np.exp(-0.5 * w))
        mix = mix_of(3, 2, Exponential(1.0))
        for m in (0, 7, 15):
            est, se = brute_h(x.values, 0.1, m, 3, 2, lambda r, d: r.exponential(1.0, d), rng, 4000)
            assert abs(h_closed_form(x, m * 0.1, mix) - est) < 4 * se

    def test_vectorised_matches_pointwise(self):
        x = state(0.05, 121, lambda w: 0.8 * np.exp(-0.3 * w))
        for mix in (mix_of(2, 1, Exponential(1.0)), mix_of(3, 1, Uniform(2.0)), mix_of(2, 2, Deterministic(1.0))):
            h = h_all(x, mix)
            for m in (0, 10, 60, 120):
                assert h[m] == pytest.approx(h_closed_form(x, m * 0.05, mix), abs=1e-9)

    def test_ignores_state_above_level(self):
        mix = mix_of(3, 2, Uniform(2.0))
        rng = np.random.default_rng(3)
        base = np.sort(rng.random(101))[::-1]
        x = Ccdf(0.05, base)
        m = 40
        tweaked = base.copy()
        tweaked[m + 1:] = np.minimum(tweaked[m + 1:] * 0.3, base[m])
        assert h_closed_form(x, m * 0.05, mix) == h_closed_form(Ccdf(0.05, tweaked), m * 0.05, mix)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_lipschitz(self, seed):
        rng = np.random.default_rng(seed)
        mix = ClassMix((JobClass(2, 1, IID(Exponential(1.0), 2)), JobClass(3, 2, IID(Uniform(2.0), 3))), (0.5, 0.5), 0.5)
        for _ in range(20):
            a = Ccdf(0.1, np.sort(rng.random(61))[::-1])
            b = Ccdf(0.1, np.sort(rng.random(61))[::-1])
            m = int(rng.integers(0, 61))
            gap = float(np.max(np.abs(a.values[: m + 1] - b.values[: m + 1])))
            diff = abs(h_closed_form(a, m * 0.1, mix) - h_closed_form(b, m * 0.1, mix))
            assert diff <= mix.dbar ** 2 * gap + 1e-12

    def test_non_iid_rejected(self):
        mix = ClassMix.single(JobClass(2, 1, CommonCopy(Exponential(1.0), 2)), 0.5)
        with pytest.raises(NonIIDError):
            h_closed_form(EMPTY, 1.0, mix)
        with pytest.raises(NonIIDError):
            solve_fp_infinite(0.5, mix, Grid(0.05, 20.0))


class TestJump:
    def test_single_component_adds_its_size(self):
        rng = np.random.default_rng(0)
        x = state(0.05, 101, lambda w: 0.5 * np.exp(-0.5 * w))
        mix = mix_of(1, 1, Deterministic(0.7))
        assert np.all(sample_jump(x, 1.0, mix, rng, 1000) == 0.7)

    def test_no_cancellation_adds_full_size(self):
        rng = np.random.default_rng(0)
        x = state(0.05, 101, lambda w: 0.5 * np.exp(-0.5 * w))
        mix = mix_of(3, 3, Deterministic(0.25))
        assert np.all(sample_jump(x, 2.0, mix, rng, 1000) == 0.25)

    def test_high_level_often_cancelled(self):
        rng = np.random.default_rng(0)
        mix = mix_of(2, 1, Exponential(1.0))
        jumps = sample_jump(EMPTY, 50.0 if EMPTY.wmax >= 50 else EMPTY.wmax, mix, rng, 2000)
        assert np.mean(jumps == 0.0) > 0.9
        assert isinstance(sample_jump(EMPTY, 0.0, mix, rng), float)


class TestMarch:
    def test_zero_rate_is_constant(self):
        tr = integrate_fde(0.3, 0.0, mix_of(2, 1, Exponential(1.0)), Grid(0.05, 10.0))
        assert np.all(tr.x.values == 0.3) and not tr.hits

    def test_zero_start(self):
        tr = integrate_fde(0.0, 0.5, mix_of(2, 1, Exponential(1.0)), Grid(0.05, 10.0))
        assert not np.any(tr.x.values)

    def test_single_server_profile(self):
        g = Grid(0.01, 20.0)
        tr = integrate_fde(0.5, 0.5, mix_of(1, 1, Exponential(1.0)), g)
        assert np.max(np.abs(tr.x.values - mm1_fixed_point(0.5, g.points))) < 10 * g.step

    def test_monte_carlo_mode(self):
        g = Grid(0.1, 6.0)
        mix = mix_of(1, 1, Exponential(1.0))
        tr = integrate_fde(0.5, 0.5, mix, g, h_mode="monte_carlo", samples=20_000, rng=np.random.default_rng(0))
        assert np.max(np.abs(tr.x.values - mm1_fixed_point(0.5, g.points))) < 0.02

    def test_errors(self):
        with pytest.raises(ValueError):
            integrate_fde(1.5, 0.5, mix_of(1, 1, Exponential(1.0)), Grid(0.1, 1.0))
        with pytest.raises(ValueError):
            Grid(0.0, 1.0)

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
    def test_non_crossing(self, a, b):
        lo, hi = sorted((a, b))
        mix = mix_of(2, 1, Uniform(2.0))
        g = Grid(0.05, 15.0)
        x_lo = integrate_fde(lo, 0.7, mix, g).x.values
        x_hi = integrate_fde(hi, 0.7, mix, g).x.values
        assert np.all(x_hi >= x_lo - 1e-12)


class TestFixedPoints:
    def test_single_server_infinite(self):
        mix = mix_of(1, 1, Exponential(1.0))
        g = Grid(0.005, 60.0)
        fp = solve_fp_infinite(0.5, mix, g)
        assert abs(fp.rho - 0.5) < 1e-3
        assert np.max(np.abs(fp.x.values - mm1_fixed_point(0.5, fp.x.points))) < 1e-3
        assert fp.residual <= 10 * g.step

    def test_supercritical(self):
        assert isinstance(solve_fp_infinite(1.2, mix_of(1, 1, Exponential(1.0)), Grid(0.02, 40.0)), Supercritical)

    def test_zero_rate(self):
        fp = solve_fp_infinite(0.0, mix_of(2, 1, Exponential(1.0)), Grid(0.05, 10.0))
        assert fp.rho == 0 and not np.any(fp.x.values)

    def test_finite_frame_trivial_cases(self):
        mix = mix_of(2, 1, Exponential(1.0))
        g = Grid(0.05, 10.0)
        assert solve_fp_finite_frame(0.0, 0.5, mix, g).rho == 0.0
        assert solve_fp_finite_frame(4.0, 0.0, mix, g).rho == 0.0
        with pytest.raises(ValueError):
            solve_fp_finite_frame(11.0, 0.5, mix, g)

    def test_finite_frame_single_server(self):
        fp = solve_fp_finite_frame(4.0, 0.5, mix_of(1, 1, Exponential(1.0)), Grid(0.005, 6.0))
        # closed-form start value: 0.4637105582521231
        assert fp.rho == pytest.approx(mm1_finite_frame_x0(0.5, 4.0), abs=1e-4)
        assert fp.hit == pytest.approx(4.0, abs=1e-6)
        assert fp.residual <= 10 * 0.005

    @pytest.mark.parametrize("law", [Exponential(1.0), Deterministic(1.0), Uniform(2.0)], ids=lambda l: l.kind)
    def test_residual_small(self, law):
        mix = mix_of(2, 1, law)
        g = Grid(0.02, 60.0)
        fp = solve_fp_infinite(0.6, mix, g)
        assert fp.residual <= 10 * g.step
        assert fde_residual(fp.x, 0.6, mix, hit=fp.hit) <= 10 * g.step

    def test_rho_curve(self):
        rows = rho_curve(mix_of(2, 1, Exponential(1.0)), [0.0, 0.3, 0.6, 1.2], Grid(0.02, 60.0))
        assert rows[0].rho == 0.0
        assert rows[1].rho == pytest.approx(0.3, abs=2e-3) and rows[2].rho == pytest.approx(0.6, abs=2e-3)
        assert rows[3].supercritical

    def test_consistency(self):
        rng = np.random.default_rng(8)
        for mix in (mix_of(1, 1, Exponential(1.0)), mix_of(2, 1, Exponential(1.0))):
            fp = solve_fp_infinite(0.5, mix, Grid(0.01, 50.0))
            rep = fp_consistency(fp, 0.5, mix, 200_000, rng)
            assert rep.within_3sigma
        zero = solve_fp_infinite(0.0, mix, Grid(0.05, 5.0))
        assert fp_consistency(zero, 0.0, mix, 10, rng).discrepancy == 0.0

    def test_export(self, tmp_path):
        fp = solve_fp_infinite(0.5, mix_of(1, 1, Exponential(1.0)), Grid(0.05, 30.0))
        fp.export(tmp_path / "fp.csv", tmp_path / "fp.json")
        back = Ccdf.from_csv(tmp_path / "fp.csv")
        assert np.array_equal(back.values, fp.x.values)
        assert (tmp_path / "fp.json").read_text().count("rho") == 1


class TestRelaxation:
    def test_empty_stays_empty_without_arrivals(self):
        out = evolve_ml(EMPTY, 0.0, mix_of(2, 1, Exponential(1.0)), 5.0)
        assert all(not np.any(s.values) for s in out.states)

    def test_from_empty_grows(self):
        out = evolve_ml(Ccdf.empty(0.05, 301), 0.6, mix_of(2, 1, Exponential(1.0)), 30.0, record_every=0.05)
        for a, b in zip(out.states, out.states[1:]):
            assert np.all(b.values >= a.values - 1e-12)

    def test_cfl(self):
        with pytest.raises(ValueError):
            evolve_ml(EMPTY, 0.5, mix_of(1, 1, Exponential(1.0)), 1.0, dt=0.1)

    def test_finite_frame_from_above(self):
        mix = mix_of(1, 1, Exponential(1.0))
        g = Grid(0.01, 6.0)
        fp = solve_fp_finite_frame(4.0, 0.5, mix, g)
        full = Ccdf.full(g.step, g.size, 4.0)
        out = evolve_ml(full, 0.5, mix, 20.0, frame=4.0, record_every=0.1)
        for a, b in zip(out.states, out.states[1:]):
            assert np.all(b.values <= a.values + 1e-12)
        down, _ = relax(full, 0.5, mix, frame=4.0)
        up, _ = relax(Ccdf.empty(g.step, g.size), 0.5, mix, frame=4.0)
        assert sup_distance(down, fp.x) < 1e-3
        assert sup_distance(up, fp.x) < 1e-3


class TestParticle:
    def test_zero_rate(self):
        occ = simulate_tagged_particle(EMPTY, 0.0, mix_of(1, 1, Exponential(1.0)), 100.0, np.random.default_rng(0))
        assert not np.any(occ.values)

    def test_reproduces_fixed_point(self):
        mix = mix_of(1, 1, Exponential(1.0))
        fp = solve_fp_infinite(0.5, mix, Grid(0.02, 40.0))
        occ = simulate_tagged_particle(fp.x, 0.5, mix, 2e5, np.random.default_rng(1))
        assert levy_distance(occ, fp.x) < 0.02

    def test_empty_environment_is_not_stationary(self):
        occ = simulate_tagged_particle(EMPTY, 0.5, mix_of(2, 1, Exponential(1.0)), 1e4, np.random.default_rng(2))
        assert occ.values[0] > 0.1
