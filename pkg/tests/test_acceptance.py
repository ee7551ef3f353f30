"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and the measured quantities they are judged on.
"""

import time

import numpy as np
import pytest

from mfg_newton import coupling as cpl
from mfg_newton import diagnostics as diag
from mfg_newton import hamiltonian as ham
from mfg_newton import mfg_solver as solver
from mfg_newton import torus_grid as tg

RATE_WINDOW = (1.7, 2.3)


def report(num, name, ok, detail=""):
    print(f"\n[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} {detail}")


def pair_norm(v_vals, rho_vals, grid):
    return (tg.sup_norm(v_vals) + tg.grad_sup_norm(v_vals, grid)
            + tg.sup_norm(rho_vals))


@pytest.fixture(scope="session")
def local_problem():
    grid = tg.GridSpec(dim=1, nx=64, nt=64, horizon=1.0)
    spec = ham.congestion(grid, 1.0, alpha=1.0)
    return diag.make_manufactured(grid, spec, cpl.LocalCoupling("sigmoid"))


@pytest.fixture(scope="session")
def newton_rate_run(local_problem):
    problem, exact = local_problem
    initial = diag.perturbed_state(exact, 1e-2)
    cfg = solver.NewtonConfig(residual_tol=1e-10, max_iter=30, error_floor=1e-10)
    t0 = time.perf_counter()
    final, history = solver.solve_newton(problem, initial, cfg, reference=exact)
    elapsed = time.perf_counter() - t0
    return final, history, elapsed


@pytest.fixture(scope="session")
def fixed_point_run(local_problem):
    problem, exact = local_problem
    initial = diag.perturbed_state(exact, 1e-2)
    cfg = solver.NewtonConfig(residual_tol=1e-9, max_iter=500, damping=0.5)
    newton_final, newton_hist = solver.solve_newton(
        problem, initial, cfg, reference=exact)
    fp_final, fp_hist = solver.solve_fixed_point(
        problem, initial, cfg, reference=exact)
    return newton_hist, fp_hist


def test_criterion_1_quadratic_rate_local(newton_rate_run):
    final, history, elapsed = newton_rate_run
    errors = [r.err_sum for r in history]
    fit = diag.fit_rate(errors, floor=1e-10)
    in_window = RATE_WINDOW[0] <= fit.order <= RATE_WINDOW[1]
    ok = in_window and fit.points_used >= 3 and elapsed <= 60.0
    pairs = [np.log(errors[i + 1] / errors[i]) for i in range(len(errors) - 1)]
    slopes = [pairs[i + 1] / pairs[i] for i in range(len(pairs) - 1)]
    report(1, "quadratic Newton rate (local congestion)", ok,
           f"q={fit.order:.3f} window={list(RATE_WINDOW)} "
           f"points={fit.points_used} runtime={elapsed:.1f}s "
           f"errors={['%.3e' % e for e in errors]} pair_slopes={np.round(slopes, 3)}")
    assert fit.points_used >= 3
    assert elapsed <= 60.0
    assert RATE_WINDOW[0] <= fit.order <= RATE_WINDOW[1], (
        f"fitted order {fit.order:.3f} outside {RATE_WINDOW}: the sequence "
        f"{['%.3e' % e for e in errors]} contracts at least quadratically but "
        "its effective constant shrinks between the only usable steps, so the "
        "two-pair log fit lands above the window's upper edge")


def test_criterion_2_one_step_contraction(local_problem):
    problem, exact = local_problem
    cfg = solver.NewtonConfig(residual_tol=1e-12)
    ks = {}
    for eps in (1e-2, 1e-3):
        initial = diag.perturbed_state(exact, eps)
        nxt, _ = solver.newton_step(problem, initial, cfg)
        e_u, e_m = diag.error_norms(nxt.u.values, nxt.m.values,
                                    exact.u.values, exact.m.values, problem.grid)
        ks[eps] = (e_u + e_m) / eps**2
    factor = max(ks.values()) / min(ks.values())
    ok = factor <= 3.0
    report(2, "one-step contraction constant", ok,
           f"K(1e-2)={ks[1e-2]:.4f} K(1e-3)={ks[1e-3]:.4f} factor={factor:.3f}")
    assert factor <= 3.0


def test_criterion_3_quadratic_rate_nonlocal():
    grid = tg.GridSpec(dim=1, nx=64, nt=64, horizon=1.0)
    spec = ham.separable_quadratic(grid, 1.0)
    coupling = solver.NonlocalCoupling(
        f=cpl.gaussian_kernel_coupling(grid, 0.1),
        g=cpl.gaussian_kernel_coupling(grid, 0.1))
    problem, exact = diag.make_manufactured_nonlocal(grid, spec, coupling)
    initial = diag.perturbed_state(exact, 1e-2)
    cfg = solver.NewtonConfig(residual_tol=1e-10, max_iter=30)
    final, history = solver.solve_newton(problem, initial, cfg, reference=exact)
    errors = [r.err_sum for r in history]
    fit = diag.fit_rate(errors, floor=1e-10)
    ok = RATE_WINDOW[0] <= fit.order <= RATE_WINDOW[1]
    report(3, "quadratic Newton rate (nonlocal coupling)", ok,
           f"q={fit.order:.3f} window={list(RATE_WINDOW)} "
           f"errors={['%.3e' % e for e in errors]}")
    assert RATE_WINDOW[0] <= fit.order <= RATE_WINDOW[1], (
        f"fitted order {fit.order:.3f} outside {RATE_WINDOW}: same superquadratic "
        "three-point termination as the local variant")


def test_criterion_4_newton_beats_fixed_point(fixed_point_run):
    newton_hist, fp_hist = fixed_point_run
    n_newton = len(newton_hist) - 1
    n_fp = len(fp_hist) - 1
    ok = n_newton < n_fp
    report(4, "Newton vs damped fixed point at tol 1e-9", ok,
           f"newton={n_newton} iterations, fixed-point={n_fp} iterations")
    assert n_newton < n_fp


def test_criterion_5_linearized_stability():
    max_ratios = {}
    zero_ok = True
    for nx in (32, 64):
        for nt in (32, 64):
            grid = tg.GridSpec(dim=1, nx=nx, nt=nt, horizon=1.0)
            spec = ham.congestion(grid, 1.0, alpha=1.0)
            problem, exact = diag.make_manufactured(
                grid, spec, cpl.LocalCoupling("sigmoid"))
            shape = (grid.nt + 1,) + grid.spatial_shape
            a0 = tg.Field(grid, np.zeros(shape))
            b0 = tg.VectorField(grid, np.zeros((1,) + shape))
            v, rho = solver.solve_linearized(problem, exact, a0, b0)
            zero_norm = pair_norm(v.values, rho.values, grid)
            zero_ok = zero_ok and zero_norm <= 1e-9
            ratios = []
            for j in range(20):
                a, b = diag.random_smooth_data(grid, seed=1000 + j)
                v, rho = solver.solve_linearized(problem, exact, a, b)
                ratios.append(pair_norm(v.values, rho.values, grid))
            max_ratios[(nx, nt)] = max(ratios)
    spread = max(max_ratios.values()) / min(max_ratios.values())
    ok = zero_ok and spread <= 1.5
    report(5, "linearized-system stability constant", ok,
           f"zero-data ok={zero_ok} max-ratios={ {k: round(v, 4) for k, v in max_ratios.items()} } "
           f"spread={spread:.3f} (limit 1.5)")
    assert zero_ok
    assert spread <= 1.5


def test_criterion_6_hessian_condition_sign_pattern():
    grid = tg.GridSpec(dim=1, nx=8, nt=2, horizon=1.0)
    mismatches = []
    alphas = (0.5, 1.0, 2.0, 2.5, 3.0)
    for alpha in alphas:
        spec = ham.congestion(grid, 1.0, alpha=alpha)
        all_sat = True
        for m in (0.1, 1.0, 10.0, 100.0):
            for p in (0.5, 1.0, 2.0):
                rep = ham.hessian_condition(spec, 0, m, [p])
                expected = 2.0 * (1.0 + m) - alpha * m > 0.0
                if rep.satisfied != expected:
                    mismatches.append((alpha, m, p))
                all_sat = all_sat and rep.satisfied
        if (alpha <= 2.0) != all_sat:
            mismatches.append((alpha, "all-satisfied-iff", alpha <= 2.0))
    ok = not mismatches
    report(6, "Hessian monotonicity sign pattern", ok,
           f"alphas={list(alphas)} mismatches={mismatches}")
    assert not mismatches


def test_criterion_7_mass_conservation(newton_rate_run, fixed_point_run):
    _, newton_hist, _ = newton_rate_run
    newton_hist9, fp_hist = fixed_point_run
    worst = 0.0
    for hist in (newton_hist, newton_hist9, fp_hist):
        for rec in hist:
            worst = max(worst, abs(rec.mass_min - 1.0), abs(rec.mass_max - 1.0))
    ok = worst <= 1e-9
    report(7, "mass conservation along all iterates", ok,
           f"worst slice-mass deviation {worst:.3e} over "
           f"{len(newton_hist) + len(newton_hist9) + len(fp_hist)} recorded iterates")
    assert worst <= 1e-9


def test_criterion_8_linearization_consistency(local_problem):
    problem, exact = local_problem
    grid = problem.grid
    state = diag.perturbed_state(exact, 5e-2)
    r0_u, r0_m = solver.residual(problem, state)
    rng = np.random.default_rng(2024)
    ratios = []
    for _ in range(5):
        du = rng.standard_normal(state.u.values.shape)
        dm = rng.standard_normal(state.m.values.shape)
        du[-1] = 0.0
        dm[0] = 0.0
        du /= np.abs(du).max()
        dm /= np.abs(dm).max()
        ju, jm = solver.linearized_apply(problem, state, du, dm)
        rems = []
        for h in (1e-3, 1e-4):
            s1 = solver.make_state(grid, state.u.values + h * du,
                                   state.m.values + h * dm)
            r1_u, r1_m = solver.residual(problem, s1)
            rem_u = ((r1_u.values - r0_u.values) - h * ju)[:grid.nt]
            rem_m = ((r1_m.values - r0_m.values) - h * jm)[1:]
            rems.append(max(np.abs(rem_u).max(), np.abs(rem_m).max()))
        ratios.append(rems[0] / rems[1])
    ok = all(50.0 <= r <= 200.0 for r in ratios)
    report(8, "directional-derivative consistency", ok,
           f"remainder ratios h:1e-3 -> 1e-4: {np.round(ratios, 1)} (window [50, 200])")
    assert all(50.0 <= r <= 200.0 for r in ratios)


def test_criterion_9_discrete_operator_suite():
    # adjointness at 1e-12 relative
    rng = np.random.default_rng(99)
    adj_ok = True
    for dim, nx in ((1, 16), (2, 8)):
        grid = tg.GridSpec(dim=dim, nx=nx, nt=2, horizon=1.0)
        shape = (3,) + grid.spatial_shape
        f = tg.Field(grid, rng.standard_normal(shape))
        F = tg.VectorField(grid, rng.standard_normal((dim,) + shape))
        lhs = float(np.sum(tg.divergence(F, 1) * f.values[1]))
        rhs = float(np.sum(F.components[:, 1] * tg.gradient(f, 1)))
        adj_ok = adj_ok and abs(lhs + rhs) <= 1e-12 * max(abs(lhs), 1.0)

    # second-order refinement on sin/cos test functions
    factors = []
    for fn, deriv, lap in (
        (lambda x: np.sin(2 * np.pi * x),
         lambda x: 2 * np.pi * np.cos(2 * np.pi * x),
         lambda x: -(2 * np.pi) ** 2 * np.sin(2 * np.pi * x)),
        (lambda x: np.cos(2 * np.pi * x),
         lambda x: -2 * np.pi * np.sin(2 * np.pi * x),
         lambda x: -(2 * np.pi) ** 2 * np.cos(2 * np.pi * x)),
    ):
        grad_errs, lap_errs = [], []
        for nx in (16, 32, 64):
            grid = tg.GridSpec(dim=1, nx=nx, nt=2, horizon=1.0)
            x = grid.x_nodes()[0]
            field = tg.Field(grid, np.tile(fn(x), (3, 1)))
            grad_errs.append(np.abs(tg.gradient(field, 0)[0] - deriv(x)).max())
            lap_errs.append(np.abs(tg.laplacian(field, 0) - lap(x)).max())
        factors += [grad_errs[0] / grad_errs[1], grad_errs[1] / grad_errs[2],
                    lap_errs[0] / lap_errs[1], lap_errs[1] / lap_errs[2]]
    refine_ok = all(f >= 3.8 for f in factors)
    ok = adj_ok and refine_ok
    report(9, "discrete operator suite", ok,
           f"adjointness<=1e-12: {adj_ok}, refinement factors {np.round(factors, 3)} (>= 3.8)")
    assert adj_ok
    assert refine_ok
