import warnings

import numpy as np
import pytest

from oracles import heat_mode, manufactured_kpp, standing_wave
from pertpinn.grid import Grid, GridField
from pertpinn.presets import DIFFUSION, get_preset
from pertpinn.problem import ConditionSpec, LinearOperator, PdeProblem, Polynomial, SpaceTimeDomain
from pertpinn.reference import (
    MolConfig,
    StiffnessError,
    dopri5,
    relative_error,
    solve_hyperbolic_fd,
    solve_parabolic_mol,
    solve_reference,
)

DOM = SpaceTimeDomain(0.0, 2.0, 1.0)
GRID = Grid(41, 21, DOM)
MODE = "sin(pi*x/2)"


def heat_problem(ic, left="0", right="0", poly=(0.0,), eps=0.0, forcing="0", D=DIFFUSION):
    return PdeProblem(LinearOperator.heat(D), Polynomial(poly), eps, DOM,
                      (ConditionSpec("initial", ic), ConditionSpec("boundary_left", left),
                       ConditionSpec("boundary_right", right)), forcing)


def exact(fn, grid):
    X, T = grid.mesh()
    return GridField(fn(X, T), grid)


# u* = e^-t (1 + cos(pi x)) with P(u) = u - u^2 and eps = 0.5
U_STAR = "exp(-t)*(1 + cos(pi*x))"
MMS_FORCING = (f"-{U_STAR} + {DIFFUSION}*pi^2*exp(-t)*cos(pi*x)"
               f" + 0.5*({U_STAR} - ({U_STAR})^2)").replace("^", "**")


def mms_problem():
    return heat_problem(U_STAR, "2*exp(-t)", "2*exp(-t)", (0.0, 1.0, -1.0), 0.5, MMS_FORCING)


def mms_exact(grid):
    return exact(lambda x, t: manufactured_kpp(x, t)[0], grid)


class TestParabolic:
    def test_heat_decay(self):
        u = solve_parabolic_mol(heat_problem(MODE), MolConfig(grid=GRID))
        ref = exact(lambda x, t: heat_mode(x, t, DIFFUSION), GRID)
        assert relative_error(u, ref).relative_l2 < 1e-4

    def test_constant_equilibrium(self):
        # P(u) = u - u^2 vanishes at u = 1
        u = solve_parabolic_mol(heat_problem("1", "1", "1", (0.0, 1.0, -1.0), 0.9), MolConfig(grid=GRID))
        assert np.max(np.abs(u.values - 1.0)) < 1e-10

    def test_forcing_expression_matches_oracle(self):
        X, T = GRID.mesh()
        u, ut, uxx = manufactured_kpp(X, T)
        f = ut - DIFFUSION * uxx + 0.5 * (u - u * u)
        assert np.allclose(mms_problem().forcing(X, T), f, rtol=1e-13, atol=1e-13)

    def test_manufactured_solution(self):
        u = solve_parabolic_mol(mms_problem(), MolConfig(grid=GRID))
        assert relative_error(u, mms_exact(GRID)).relative_l2 <= 1e-4

    def test_grid_convergence(self):
        errs = []
        for n_x in (26, 51, 101):
            u = solve_parabolic_mol(mms_problem(), MolConfig(n_x=n_x, rtol=1e-11, atol=1e-11, grid=Grid(26, 11, DOM)))
            errs.append(relative_error(u, mms_exact(Grid(26, 11, DOM))).relative_l2)
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(3.0 <= r <= 5.0 for r in ratios), (errs, ratios)

    def test_tighter_tolerance_is_within_error_bar(self):
        a = solve_parabolic_mol(mms_problem(), MolConfig(grid=GRID))
        b = solve_parabolic_mol(mms_problem(), MolConfig(rtol=1e-10, atol=1e-10, grid=GRID))
        err = relative_error(a, mms_exact(GRID)).relative_l2
        assert relative_error(a, b).relative_l2 < err

    @pytest.mark.filterwarnings("ignore:initial and")
    def test_matches_zero_order_target(self):
        # at epsilon = 0 the nonlinear solver solves the linear order-0 problem
        prob = get_preset("kpp-1")
        a = solve_reference(prob.with_epsilon(0.0), MolConfig(grid=GRID))
        lin = prob.with_epsilon(0.7)
        lin = PdeProblem(lin.operator, Polynomial((0.0,)), 0.7, lin.domain, lin.conditions, lin.forcing)
        b = solve_reference(lin, MolConfig(grid=GRID))
        assert np.array_equal(a.values, b.values)

    def test_corner_warning(self):
        with pytest.warns(UserWarning, match="disagree"):
            solve_parabolic_mol(heat_problem("1", "0", "0"), MolConfig(n_x=21, grid=Grid(21, 5, DOM)))

    def test_no_warning_when_consistent(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            solve_parabolic_mol(heat_problem(MODE), MolConfig(n_x=21, grid=Grid(21, 5, DOM)))

    def test_rejects_wave(self):
        with pytest.raises(ValueError):
            solve_parabolic_mol(get_preset("wave-1"))

    def test_info(self):
        info = {}
        solve_parabolic_mol(heat_problem(MODE), MolConfig(n_x=21, grid=Grid(21, 5, DOM)), info)
        assert info["accepted"] > 0 and info["n_x"] == 21


class TestHyperbolic:
    def wave(self, ic, vel, poly=(0.0,), eps=0.0):
        return PdeProblem(LinearOperator.wave(1.0), Polynomial(poly), eps, DOM,
                          (ConditionSpec("initial", ic), ConditionSpec("initial", vel, 1),
                           ConditionSpec("boundary_left", "0"), ConditionSpec("boundary_right", "0")))

    def test_standing_wave(self):
        u = solve_hyperbolic_fd(self.wave(MODE, "0"), MolConfig(grid=GRID))
        assert relative_error(u, exact(standing_wave, GRID)).relative_l2 < 1e-4

    def test_zero_data(self):
        u = solve_hyperbolic_fd(self.wave("0", "0", (0.0, 1.0, 0.0, -1 / 6), 0.75), MolConfig(n_x=41, grid=GRID))
        assert np.array_equal(u.values, np.zeros(GRID.shape))

    def test_wave_preset_bounded(self):
        prob = get_preset("wave-1")
        info = {}
        u = solve_reference(prob, MolConfig(grid=GRID), info)
        assert np.all(np.isfinite(u.values)) and np.max(np.abs(u.values)) < 10
        e = info["energy"][:, 1]
        assert np.all(np.isfinite(e)) and e.max() < 10 * e[0]

    def test_linear_energy_conserved(self):
        info = {}
        solve_hyperbolic_fd(self.wave(MODE, "0"), MolConfig(grid=GRID), info)
        e = info["energy"][:, 1]
        assert np.ptp(e) / e[0] < 1e-3

    def test_needs_both_initial_conditions(self):
        p = heat_problem(MODE)
        bad = PdeProblem(LinearOperator.wave(1.0), p.perturbation, 0.0, DOM, p.conditions)
        with pytest.raises(ValueError):
            solve_hyperbolic_fd(bad)


class TestRelativeError:
    def test_identical(self):
        f = exact(lambda x, t: 1 + x * t, GRID)
        r = relative_error(f, f)
        assert (r.relative_l2, r.max_abs) == (0.0, 0.0)

    def test_scaling(self):
        f = exact(lambda x, t: 1 + x * t, GRID)
        r = relative_error(GridField(1.01 * f.values, GRID), f)
        assert r.relative_l2 == pytest.approx(0.01, rel=1e-12)

    def test_constant_offset(self):
        v = np.random.default_rng(0).normal(size=GRID.shape)
        v /= np.linalg.norm(v)
        ref = GridField(v, GRID)
        r = relative_error(GridField(v + 0.003, GRID), ref)
        assert r.relative_l2 == pytest.approx(0.003 * np.sqrt(v.size), rel=1e-10)
        assert r.max_abs == pytest.approx(0.003)

    def test_zero_reference(self):
        z = GridField(np.zeros(GRID.shape), GRID)
        with pytest.raises(ValueError):
            relative_error(z, z)

    def test_grid_mismatch(self):
        a = GridField(np.ones(GRID.shape), GRID)
        g = Grid(11, 11, DOM)
        with pytest.raises(ValueError):
            relative_error(GridField(np.ones(g.shape), g), a)


class TestIntegrator:
    def test_exponential(self):
        ts = np.linspace(0, 2, 9)
        y, stats = dopri5(lambda t, y: -y, np.array([1.0, 2.0]), 2.0, ts, 1e-10, 1e-12)
        assert np.allclose(y, np.exp(-ts)[:, None] * [1, 2], rtol=1e-8)
        assert stats["accepted"] > 0

    def test_landing_beats_interpolation(self):
        ts = np.linspace(0, 1, 50)
        rhs = lambda t, y: np.cos(t) + 0 * y  # noqa: E731
        lin, _ = dopri5(rhs, np.zeros(1), 1.0, ts, 1e-10, 1e-12, land_on_output=False)
        land, _ = dopri5(rhs, np.zeros(1), 1.0, ts, 1e-10, 1e-12)
        err_lin = np.max(np.abs(lin[:, 0] - np.sin(ts)))
        # smooth problems take long steps, so chords between them are visibly off
        assert 1e-6 < err_lin < 5e-2
        assert np.max(np.abs(land[:, 0] - np.sin(ts))) < 1e-9

    def test_blowup_reports_stiffness(self):
        with pytest.raises((StiffnessError, FloatingPointError)):
            dopri5(lambda t, y: y * y, np.ones(1), 2.0, np.array([0.0, 2.0]), max_steps=10_000)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MolConfig(n_x=8)
        with pytest.raises(ValueError):
            MolConfig(rtol=0)
