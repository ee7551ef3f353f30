"""Coupled value/density solver: residual, Newton steps, baselines, probes.

The system couples a backward Hamilton-Jacobi-Bellman equation for the value
function u with a forward Fokker-Planck equation for the density m on the
periodic space-time grid:

    -du/dt - lap u + H(x, m, Du) = f(m) + s_u        (rows k = 0..nt-1)
     dm/dt - lap m - div(m H_p(x, m, Du)) = s_m      (rows k = 1..nt)
     m(0) = m0,  u(T) = uT   (local coupling)
     m(0) = m0,  u(T) = g[m(T)]   (kernel coupling)

The discretization is fully implicit with every coefficient evaluated at the
same time node as the unknown it multiplies, so the assembled Jacobian of the
discrete residual is exactly the discrete linearized system; one sparse solve
of it per iteration is a Newton step.  Unknowns are the u slices k = 0..nt-1
(plus the terminal slice in the kernel-coupled variant, whose boundary row
couples to the unknown terminal density) and the m slices k = 1..nt; known
boundary slices are moved to the right-hand side.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import coupling as cpl
from . import diagnostics as diag
from . import hamiltonian as ham
from . import sparse_linalg as sla
from . import torus_grid as tg
from .errors import DomainError, MaxIterExceededError, SingularMatrixError

MASS_TOL = 1e-8


@dataclass(frozen=True)
class NonlocalCoupling:
    """Kernel couplings for the running cost (f) and the terminal cost (g)."""

    f: cpl.KernelCoupling
    g: cpl.KernelCoupling


@dataclass(frozen=True)
class ProblemSpec:
    grid: tg.GridSpec
    hamiltonian: ham.HamiltonianSpec
    coupling: cpl.LocalCoupling | NonlocalCoupling
    m0: np.ndarray
    uT: np.ndarray | None = None
    s_u: tg.Field | None = None
    s_m: tg.Field | None = None

    def __post_init__(self):
        grid = self.grid
        if self.hamiltonian.grid != grid:
            raise ValueError("hamiltonian grid does not match problem grid")
        m0 = np.array(self.m0, dtype=float).reshape(grid.spatial_shape)
        if not np.all(m0 > 0):
            raise ValueError("m0 must be strictly positive on all nodes")
        mass = grid.cell_volume * m0.sum()
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"m0 mass {mass:.12g} != 1")
        m0.setflags(write=False)
        object.__setattr__(self, "m0", m0)
        if self.is_nonlocal:
            if self.uT is not None:
                raise ValueError("kernel-coupled problems derive u(T) from g[m(T)]")
            if self.coupling.f.grid != grid or self.coupling.g.grid != grid:
                raise ValueError("kernel coupling grid does not match problem grid")
        else:
            if self.uT is None:
                raise ValueError("local problems need a terminal value uT")
            uT = np.array(self.uT, dtype=float).reshape(grid.spatial_shape)
            uT.setflags(write=False)
            object.__setattr__(self, "uT", uT)
        for name in ("s_u", "s_m"):
            f = getattr(self, name)
            if f is not None and f.grid != grid:
                raise ValueError(f"{name} grid does not match problem grid")

    @property
    def is_nonlocal(self) -> bool:
        return isinstance(self.coupling, NonlocalCoupling)


@dataclass(frozen=True)
class SolverState:
    u: tg.Field
    m: tg.Field

    def __post_init__(self):
        if self.u.grid != self.m.grid:
            raise ValueError("u and m must live on the same grid")

    @property
    def grid(self) -> tg.GridSpec:
        return self.u.grid


def make_state(grid: tg.GridSpec, u_vals, m_vals) -> SolverState:
    return SolverState(
        u=tg.Field(grid, u_vals, role="value-function"),
        m=tg.Field(grid, m_vals, role="density"),
    )


@dataclass(frozen=True)
class NewtonConfig:
    max_iter: int = 30
    residual_tol: float = 1e-9
    error_floor: float = 1e-10
    linear_method: sla.Direct | sla.Iterative = sla.Direct()
    damping: float = 0.5  # fixed-point iteration only

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


# -- residual -----------------------------------------------------------------

def _coupling_values(p: ProblemSpec, m_vals: np.ndarray) -> np.ndarray:
    """f(m) (local) or f[m](x) (kernel) on every time slice."""
    if p.is_nonlocal:
        flat = m_vals.reshape(p.grid.nt + 1, -1)
        return (flat @ p.coupling.f.conv.T).reshape(m_vals.shape)
    return np.asarray(cpl.local_eval(p.coupling, m_vals).f)


def _source(f: tg.Field | None, shape) -> np.ndarray:
    return np.zeros(shape) if f is None else f.values


def residual(p: ProblemSpec, s: SolverState) -> tuple[tg.Field, tg.Field]:
    """Discrete residual fields (r_u, r_m), boundary rows included.

    r_u carries the backward equation on slices 0..nt-1 and the terminal
    condition on slice nt; r_m carries the initial condition on slice 0 and
    the forward equation on slices 1..nt.
    """
    grid = p.grid
    nt, dt = grid.nt, grid.dt
    u, m = s.u.values, s.m.values
    du = tg.grad_array(u, grid)
    b = ham.eval_bundle_arrays(p.hamiltonian, p.hamiltonian.h, m, du)
    fvals = _coupling_values(p, m)
    s_u = _source(p.s_u, u.shape)
    s_m = _source(p.s_m, m.shape)

    r_u = np.empty_like(u)
    r_u[:nt] = (
        -(u[1:] - u[:-1]) / dt
        - tg.lap_array(u, grid)[:nt]
        + b.H[:nt]
        - fvals[:nt]
        - s_u[:nt]
    )
    if p.is_nonlocal:
        r_u[nt] = u[nt] - p.coupling.g.values(m[nt])
    else:
        r_u[nt] = u[nt] - p.uT

    r_m = np.empty_like(m)
    r_m[1:] = (
        (m[1:] - m[:-1]) / dt
        - tg.lap_array(m, grid)[1:]
        - tg.div_array(m * b.Hp, grid)[1:]
        - s_m[1:]
    )
    r_m[0] = m[0] - p.m0
    return (
        tg.Field(grid, r_u, role="perturbation"),
        tg.Field(grid, r_m, role="perturbation"),
    )


# -- per-grid stencil operators on flattened spatial indices -------------------

class _SpatialOps:
    def __init__(self, grid: tg.GridSpec):
        n = grid.n_space
        idx = np.arange(n).reshape(grid.spatial_shape)
        self.n = n
        self.inv2dx = 1.0 / (2.0 * grid.dx)
        self.node = np.arange(n)
        self.ip = [np.roll(idx, -1, axis=a).ravel() for a in range(grid.dim)]
        self.im = [np.roll(idx, 1, axis=a).ravel() for a in range(grid.dim)]
        self.eye = sp.identity(n, format="csr")
        self.diff = []
        lap = sp.csr_matrix((n, n))
        for a in range(grid.dim):
            rows = np.concatenate([self.node, self.node])
            cols = np.concatenate([self.ip[a], self.im[a]])
            d = sp.csr_matrix(
                (np.concatenate([np.full(n, self.inv2dx), np.full(n, -self.inv2dx)]),
                 (rows, cols)), shape=(n, n))
            self.diff.append(d)
            lap = lap + sp.csr_matrix(
                (np.concatenate([np.full(n, 1.0), np.full(n, 1.0), np.full(n, -2.0)])
                 / grid.dx**2,
                 (np.concatenate([self.node, self.node, self.node]),
                  np.concatenate([self.ip[a], self.im[a], self.node]))),
                shape=(n, n))
        self.lap = lap.tocsr()

    def advection(self, w):
        """sum_a diag(w_a) D_a, the transport part of the backward equation."""
        out = sp.diags(w[0]) @ self.diff[0]
        for a in range(1, len(self.diff)):
            out = out + sp.diags(w[a]) @ self.diff[a]
        return out

    def drift_div(self, c):
        """sum_a D_a diag(c_a): w -> div(c w) for a scalar unknown w."""
        out = self.diff[0] @ sp.diags(c[0])
        for a in range(1, len(self.diff)):
            out = out + self.diff[a] @ sp.diags(c[a])
        return out

    def flux_div(self, a_mat):
        """w -> div(A grad w) for a per-node matrix field A, shape (d, d, n)."""
        out = None
        for a in range(len(self.diff)):
            for b in range(len(self.diff)):
                if not np.any(a_mat[a, b]):
                    continue
                term = self.diff[a] @ sp.diags(a_mat[a, b]) @ self.diff[b]
                out = term if out is None else out + term
        if out is None:
            out = sp.csr_matrix((self.n, self.n))
        return out


@lru_cache(maxsize=16)
def _spatial_ops(grid: tg.GridSpec) -> _SpatialOps:
    return _SpatialOps(grid)


# -- unknown layout and assembly ----------------------------------------------

class _Layout:
    """Index map for the stacked unknown vector.

    u slices 0..nt-1 are unknown (plus slice nt in the kernel-coupled
    variant, which keeps its boundary row because it couples to the unknown
    terminal density); m slices 1..nt are unknown, m slice 0 is known.
    """

    def __init__(self, grid: tg.GridSpec, nonlocal_terminal: bool):
        self.grid = grid
        self.n = grid.n_space
        self.nt = grid.nt
        self.n_u_slices = grid.nt + (1 if nonlocal_terminal else 0)
        self.size = (self.n_u_slices + grid.nt) * self.n

    def u_off(self, k: int) -> int | None:
        return k * self.n if k < self.n_u_slices else None

    def m_off(self, k: int) -> int | None:
        if 1 <= k <= self.nt:
            return (self.n_u_slices + k - 1) * self.n
        return None

    def pack(self, u_stack: np.ndarray, m_stack: np.ndarray) -> np.ndarray:
        u_flat = u_stack.reshape(self.nt + 1, -1)
        m_flat = m_stack.reshape(self.nt + 1, -1)
        return np.concatenate([u_flat[: self.n_u_slices].ravel(), m_flat[1:].ravel()])

    def scatter(self, x: np.ndarray):
        shape = (self.nt + 1,) + self.grid.spatial_shape
        u_stack = np.zeros(shape)
        m_stack = np.zeros(shape)
        nu = self.n_u_slices * self.n
        u_stack.reshape(self.nt + 1, -1)[: self.n_u_slices] = x[:nu].reshape(self.n_u_slices, self.n)
        m_stack.reshape(self.nt + 1, -1)[1:] = x[nu:].reshape(self.nt, self.n)
        return u_stack, m_stack


class _Sink:
    def __init__(self, size: int):
        self.rows = []
        self.cols = []
        self.vals = []
        self.rhs_corr = np.zeros(size)
        self.size = size

    def block(self, row_off: int, col_off: int, op) -> None:
        coo = sp.coo_matrix(op)
        self.rows.append(coo.row.astype(np.int64) + row_off)
        self.cols.append(coo.col.astype(np.int64) + col_off)
        self.vals.append(coo.data)

    def block_known(self, row_off: int, op, delta: np.ndarray | None) -> None:
        # Column slice is a known boundary value: its contribution moves to
        # the right-hand side of the Newton system.
        if delta is None or not np.any(delta):
            return
        self.rhs_corr[row_off:row_off + delta.size] -= op @ delta

    def matrix(self) -> sla.SparseMatrix:
        rows = np.concatenate(self.rows) if self.rows else np.array([], dtype=np.int64)
        cols = np.concatenate(self.cols) if self.cols else np.array([], dtype=np.int64)
        vals = np.concatenate(self.vals) if self.vals else np.array([])
        return sla.SparseMatrix.from_triplets(self.size, self.size, rows, cols, vals)


def _state_coefficients(p: ProblemSpec, u_vals: np.ndarray, m_vals: np.ndarray):
    """Hamiltonian bundle and coupling slopes at a state, flattened spatially."""
    grid = p.grid
    n = grid.n_space
    du = tg.grad_array(u_vals, grid).reshape(grid.dim, grid.nt + 1, n)
    m_flat = m_vals.reshape(grid.nt + 1, n)
    h_flat = p.hamiltonian.h.ravel()
    bundle = ham.eval_bundle_arrays(p.hamiltonian, h_flat, m_flat, du)
    f1 = None
    if not p.is_nonlocal:
        f1 = np.asarray(cpl.local_eval(p.coupling, m_flat).f1)
    return m_flat, bundle, f1


def _assemble_jacobian(p: ProblemSpec, state: SolverState,
                       delta_uT: np.ndarray | None = None,
                       delta_m0: np.ndarray | None = None):
    """Jacobian of the interior residual rows w.r.t. the unknown slices.

    ``delta_uT``/``delta_m0`` are corrections for boundary slices of the
    base state that do not yet satisfy their boundary rows; their weighted
    contributions are returned inside the right-hand-side correction.
    """
    grid = p.grid
    nt, dt = grid.nt, grid.dt
    ops = _spatial_ops(grid)
    layout = _Layout(grid, p.is_nonlocal)
    sink = _Sink(layout.size)
    m_flat, b, f1 = _state_coefficients(p, state.u.values, state.m.values)
    inv_dt = 1.0 / dt

    conv_f = p.coupling.f.conv if p.is_nonlocal else None

    for k in range(nt):  # backward-equation rows
        row = layout.u_off(k)
        diag_block = inv_dt * ops.eye - ops.lap + ops.advection(b.Hp[:, k])
        sink.block(row, layout.u_off(k), diag_block)
        up = layout.u_off(k + 1)
        if up is not None:
            sink.block(row, up, -inv_dt * ops.eye)
        else:
            sink.block_known(row, -inv_dt * ops.eye, delta_uT)
        if p.is_nonlocal:
            m_block = sp.coo_matrix(-conv_f)
        else:
            m_block = sp.diags(b.Hm[k] - f1[k])
        mo = layout.m_off(k)
        if mo is not None:
            sink.block(row, mo, m_block)
        else:
            sink.block_known(row, m_block, delta_m0)

    if p.is_nonlocal:  # terminal boundary row stays in the system
        row = layout.u_off(nt)
        sink.block(row, layout.u_off(nt), ops.eye)
        sink.block(row, layout.m_off(nt), sp.coo_matrix(-p.coupling.g.conv))

    for k in range(1, nt + 1):  # forward-equation rows
        row = layout.m_off(k)
        drift = b.Hp[:, k].copy()
        if not p.is_nonlocal:
            # dH_p/dm contributes an extra drift on the unknown density
            m_diag = (inv_dt * ops.eye - ops.lap
                      - ops.drift_div(drift)
                      - ops.drift_div(m_flat[k] * b.Hpm[:, k]))
        else:
            m_diag = inv_dt * ops.eye - ops.lap - ops.drift_div(drift)
        sink.block(row, layout.m_off(k), m_diag)
        mo_prev = layout.m_off(k - 1)
        if mo_prev is not None:
            sink.block(row, mo_prev, -inv_dt * ops.eye)
        else:
            sink.block_known(row, -inv_dt * ops.eye, delta_m0)
        u_block = -ops.flux_div(m_flat[k] * b.Hpp[:, :, k])
        uo = layout.u_off(k)
        if uo is not None:
            sink.block(row, uo, u_block)
        else:
            sink.block_known(row, u_block, delta_uT)

    return sink.matrix(), sink.rhs_corr, layout


def newton_system(p: ProblemSpec, prev: SolverState):
    """Assembled Newton linear system at ``prev`` (matrix, rhs, layout).

    The solution vector is the update (u^n - u^{n-1}, m^n - m^{n-1}) on the
    unknown slices.
    """
    grid = p.grid
    delta_uT = None
    if not p.is_nonlocal:
        delta_uT = (p.uT - prev.u.values[grid.nt]).ravel()
    delta_m0 = (p.m0 - prev.m.values[0]).ravel()
    matrix, rhs_corr, layout = _assemble_jacobian(p, prev, delta_uT, delta_m0)
    r_u, r_m = residual(p, prev)
    rhs = layout.pack(-r_u.values, -r_m.values) + rhs_corr
    return sla.LinearSystem(matrix, rhs), layout


def newton_step(p: ProblemSpec, prev: SolverState, cfg: NewtonConfig):
    """One Newton iteration; returns (next state, linear-solve metadata)."""
    system, layout = newton_system(p, prev)
    x = sla.solve(system, cfg.linear_method)
    du, dm = layout.scatter(x)
    u_next = prev.u.values + du
    m_next = prev.m.values + dm
    if not p.is_nonlocal:
        u_next[p.grid.nt] = p.uT
    m_next[0] = p.m0
    return make_state(p.grid, u_next, m_next), system.meta


def linearized_apply(p: ProblemSpec, state: SolverState,
                     du_vals: np.ndarray, dm_vals: np.ndarray):
    """Linearized residual map applied to a direction with zero boundary slices.

    Returns stacked row images (u rows on slices 0..nt-1 plus the terminal
    row in the kernel-coupled variant, m rows on slices 1..nt)."""
    matrix, _, layout = _assemble_jacobian(p, state)
    y = matrix.matvec(layout.pack(du_vals, dm_vals))
    return layout.scatter(y)


def _record(it, p, state, reference, wall_ms) -> diag.IterationRecord:
    r_u, r_m = residual(p, state)
    masses = tg.slice_masses(state.m.values, p.grid)
    err_u = err_m = err_sum = None
    if reference is not None:
        err_u, err_m = diag.error_norms(
            state.u.values, state.m.values,
            reference.u.values, reference.m.values, p.grid)
        err_sum = err_u + err_m
    return diag.IterationRecord(
        iter=it,
        res_u_sup=tg.sup_norm(r_u.values),
        res_m_sup=tg.sup_norm(r_m.values),
        err_c10_u=err_u, err_c0_m=err_m, err_sum=err_sum,
        mass_min=float(masses.min()), mass_max=float(masses.max()),
        wall_ms=wall_ms,
    )


def _res_sup(rec: diag.IterationRecord) -> float:
    return max(rec.res_u_sup, rec.res_m_sup)


def _initial_record(p, initial, reference) -> diag.IterationRecord:
    try:
        return _record(0, p, initial, reference, 0.0)
    except DomainError as exc:
        raise DomainError(f"{exc} (iterate 0, initial state)") from exc


def solve_newton(p: ProblemSpec, initial: SolverState, cfg: NewtonConfig,
                 reference: SolverState | None = None):
    """Newton iteration to sup-norm residual <= cfg.residual_tol.

    history[0] records the initial state; one record follows per step.
    Raises MaxIterExceededError (carrying the history) when the budget is
    exhausted, and annotates Hamiltonian-domain or singular-operator failures
    with the iterate index so divergence is never silent.
    """
    history = [_initial_record(p, initial, reference)]
    state = initial
    steps = 0
    while _res_sup(history[-1]) > cfg.residual_tol:
        if steps >= cfg.max_iter:
            raise MaxIterExceededError(
                f"Newton did not reach tol {cfg.residual_tol:.1e} "
                f"in {cfg.max_iter} steps (residual {_res_sup(history[-1]):.3e})",
                final=state, history=history)
        t0 = time.perf_counter()
        try:
            state, _ = newton_step(p, state, cfg)
            steps += 1
            history.append(_record(
                steps, p, state, reference, (time.perf_counter() - t0) * 1e3))
        except DomainError as exc:
            raise DomainError(f"{exc} (Newton iterate {steps + 1})") from exc
        except SingularMatrixError as exc:
            raise SingularMatrixError(str(exc), iterate=steps + 1) from exc
    return state, history


# -- damped fixed-point (Picard) baseline --------------------------------------

def _hjb_terminal(p: ProblemSpec, m_vals: np.ndarray) -> np.ndarray:
    if p.is_nonlocal:
        return p.coupling.g.values(m_vals[p.grid.nt])
    return p.uT


def _solve_hjb_frozen_density(p: ProblemSpec, m_vals: np.ndarray,
                              u_init: np.ndarray, cfg: NewtonConfig,
                              max_inner: int = 50) -> np.ndarray:
    """Inner Newton solve of the backward equation with the density frozen.

    Same machinery as the coupled step with the density columns removed: the
    unknowns are the u slices 0..nt-1, the terminal slice is pinned.
    """
    grid = p.grid
    nt, dt, n = grid.nt, grid.dt, grid.n_space
    ops = _spatial_ops(grid)
    inv_dt = 1.0 / dt
    fvals = _coupling_values(p, m_vals)
    s_u = _source(p.s_u, u_init.shape)
    u = u_init.copy()
    u[nt] = _hjb_terminal(p, m_vals)
    m_flat = m_vals.reshape(nt + 1, n)
    h_flat = p.hamiltonian.h.ravel()

    for inner in range(max_inner + 1):
        du = tg.grad_array(u, grid).reshape(grid.dim, nt + 1, n)
        b = ham.eval_bundle_arrays(p.hamiltonian, h_flat, m_flat, du)
        r = (-(u[1:] - u[:-1]) / dt - tg.lap_array(u, grid)[:nt]
             + b.H.reshape(nt + 1, *grid.spatial_shape)[:nt]
             - fvals[:nt] - s_u[:nt])
        if tg.sup_norm(r) <= cfg.residual_tol:
            return u
        if inner == max_inner:
            break
        sink = _Sink(nt * n)
        for k in range(nt):
            diag_block = inv_dt * ops.eye - ops.lap + ops.advection(b.Hp[:, k])
            sink.block(k * n, k * n, diag_block)
            if k + 1 < nt:
                sink.block(k * n, (k + 1) * n, -inv_dt * ops.eye)
        system = sla.LinearSystem(sink.matrix(), -r.reshape(-1))
        delta = sla.solve(system, cfg.linear_method)
        u[:nt] += delta.reshape(nt, *grid.spatial_shape)
    raise MaxIterExceededError(
        f"inner value-function Newton stalled above tol {cfg.residual_tol:.1e}")


def _solve_fp_frozen_drift(p: ProblemSpec, drift: np.ndarray,
                           cfg: NewtonConfig) -> np.ndarray:
    """Linear forward solve with a frozen drift field, shape (dim, nt+1, n)."""
    grid = p.grid
    nt, dt, n = grid.nt, grid.dt, grid.n_space
    ops = _spatial_ops(grid)
    inv_dt = 1.0 / dt
    s_m = _source(p.s_m, (nt + 1,) + grid.spatial_shape).reshape(nt + 1, n)
    sink = _Sink(nt * n)
    rhs = np.empty(nt * n)
    for k in range(1, nt + 1):
        row = (k - 1) * n
        block = inv_dt * ops.eye - ops.lap - ops.drift_div(drift[:, k])
        sink.block(row, (k - 1) * n, block)
        if k >= 2:
            sink.block(row, (k - 2) * n, -inv_dt * ops.eye)
        rhs[row:row + n] = s_m[k]
    rhs[:n] += inv_dt * p.m0.ravel()
    x = sla.solve(sla.LinearSystem(sink.matrix(), rhs), cfg.linear_method)
    m = np.empty((nt + 1,) + grid.spatial_shape)
    m[0] = p.m0
    m[1:] = x.reshape(nt, *grid.spatial_shape)
    return m


def solve_fixed_point(p: ProblemSpec, initial: SolverState, cfg: NewtonConfig,
                      reference: SolverState | None = None):
    """Damped Picard iteration: freeze the density, solve the backward
    equation, solve the forward equation with the resulting drift, and relax
    the density with factor cfg.damping.  Stops on the coupled residual."""
    history = [_initial_record(p, initial, reference)]
    state = initial
    steps = 0
    grid = p.grid
    n = grid.n_space
    h_flat = p.hamiltonian.h.ravel()
    while _res_sup(history[-1]) > cfg.residual_tol:
        if steps >= cfg.max_iter:
            raise MaxIterExceededError(
                f"fixed point did not reach tol {cfg.residual_tol:.1e} "
                f"in {cfg.max_iter} iterations (residual {_res_sup(history[-1]):.3e})",
                final=state, history=history)
        t0 = time.perf_counter()
        m_prev = state.m.values
        u_new = _solve_hjb_frozen_density(p, m_prev, state.u.values, cfg)
        du = tg.grad_array(u_new, grid).reshape(grid.dim, grid.nt + 1, n)
        b = ham.eval_bundle_arrays(
            p.hamiltonian, h_flat, m_prev.reshape(grid.nt + 1, n), du)
        m_new = _solve_fp_frozen_drift(p, b.Hp, cfg)
        m_next = (1.0 - cfg.damping) * m_prev + cfg.damping * m_new
        state = make_state(grid, u_new, m_next)
        steps += 1
        history.append(_record(
            steps, p, state, reference, (time.perf_counter() - t0) * 1e3))
    return state, history


# -- perturbed linearized system (stability probe) ------------------------------

def solve_linearized(p: ProblemSpec, base: SolverState, a: tg.Field,
                     b: tg.VectorField, c: np.ndarray | None = None,
                     method: sla.Direct | sla.Iterative = sla.Direct()):
    """Solve the linearized system around ``base`` with data (a, div b).

    The operator is the same Jacobian a Newton step solves, with coefficients
    frozen at ``base``; the right-hand side carries a on the backward rows and
    div b on the forward rows, with homogeneous boundary rows (v(T) = 0 for
    the local variant, rho(0) = 0).  In the kernel-coupled variant the
    terminal row reads v(T) = (dg/dm) rho(T) + c.
    """
    grid = p.grid
    if a.grid != grid or b.grid != grid:
        raise ValueError("data fields must live on the problem grid")
    matrix, _, layout = _assemble_jacobian(p, base)
    rhs = np.zeros(layout.size)
    n = grid.n_space
    for k in range(grid.nt):
        rhs[layout.u_off(k):layout.u_off(k) + n] = a.values[k].ravel()
    if p.is_nonlocal:
        term = np.zeros(n) if c is None else np.asarray(c, dtype=float).ravel()
        rhs[layout.u_off(grid.nt):layout.u_off(grid.nt) + n] = term
    elif c is not None and np.any(c):
        raise ValueError("terminal data c only applies to kernel-coupled problems")
    div_b = tg.div_array(b.components, grid)
    for k in range(1, grid.nt + 1):
        rhs[layout.m_off(k):layout.m_off(k) + n] = div_b[k].ravel()
    x = sla.solve(sla.LinearSystem(matrix, rhs), method)
    v_vals, rho_vals = layout.scatter(x)
    return (
        tg.Field(grid, v_vals, role="perturbation"),
        tg.Field(grid, rho_vals, role="perturbation"),
    )
