"""Linear-Gaussian filtering models and their dual control problems.

The state is an Ornstein-Uhlenbeck diffusion and the observation is a
linearly read-out signal in additive white noise.  Alongside the
Kalman-Bucy filter this module carries both dual formulations: the
backward linear-quadratic control problem whose optimal cost equals the
filter's mean squared error, and the forward minimum-energy problem
whose optimizer is the fixed-interval smoother.

Conventions
-----------
State dimension d, observation dimension m.  Drift enters the state
equation through the transpose of ``a_mat`` and observations through
the transpose of ``h_mat``, so ``a_mat`` is (d, d), ``h_mat`` is
(d, m), and the dual backward equation uses ``a_mat`` and ``h_mat``
untransposed.  Controls and dual trajectories are stored as node
arrays aligned with ``TimeGrid.nodes()``; observation increments are
per-step arrays of length ``n_steps``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from duality_lab.errors import (
    DimensionError,
    GridMismatchError,
    IntegrationDivergedError,
    NoiseNotSpdError,
    NotPositiveDefiniteError,
    SingularCovarianceError,
    SingularPriorError,
    ValidationError,
)
from duality_lab.numkit import (
    ObservationPath,
    SeededRng,
    TimeGrid,
    affine_backward,
    integrate_ode,
    psd_sqrt,
    quad_form,
    rk4_linear_step_matrix,
    spd_factor,
)

_MC_CHUNK = 2048


def _as_matrix(name, value, shape=None):
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _as_vector(name, value, length=None):
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a 1-d array, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DimensionError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _symmetric_psd(name, arr):
    if np.max(np.abs(arr - arr.T)) > 1e-12 * max(np.max(np.abs(arr)), 1e-300):
        raise ValidationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(arr)
    if w.size and w[0] < -1e-10 * max(w[-1], 0.0) - 1e-300:
        raise ValidationError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class LinearGaussianModel:
    """Coefficients of the signal-observation pair.

    a_mat : (d, d) drift coefficient; the state drift is a_mat.T @ x.
    h_mat : (d, m) observation coefficient; the drift of Z is h_mat.T @ x.
    sigma : (d, d) state noise gain.
    r_cov : (m, m) observation noise covariance, symmetric positive definite.
    m0, sigma0 : prior mean (d,) and covariance (d, d), PSD.
    """

    a_mat: np.ndarray
    h_mat: np.ndarray
    sigma: np.ndarray
    r_cov: np.ndarray
    m0: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        a = _as_matrix("a_mat", self.a_mat)
        d = a.shape[0]
        if a.shape != (d, d):
            raise DimensionError(f"a_mat must be square, got {a.shape}")
        h = _as_matrix("h_mat", self.h_mat)
        if h.shape[0] != d:
            raise DimensionError(
                f"h_mat must have {d} rows to match a_mat, got {h.shape}"
            )
        m = h.shape[1]
        s = _as_matrix("sigma", self.sigma, (d, d))
        r = _as_matrix("r_cov", self.r_cov, (m, m))
        try:
            spd_factor(r)
        except NotPositiveDefiniteError as err:
            raise NoiseNotSpdError(
                "r_cov must be symmetric positive definite"
            ) from err
        m0 = _as_vector("m0", self.m0, d)
        s0 = _as_matrix("sigma0", self.sigma0, (d, d))
        _symmetric_psd("sigma0", s0)
        for name, val in (
            ("a_mat", a), ("h_mat", h), ("sigma", s),
            ("r_cov", r), ("m0", m0), ("sigma0", s0),
        ):
            object.__setattr__(self, name, val)

    @property
    def d(self):
        return self.a_mat.shape[0]

    @property
    def m(self):
        return self.h_mat.shape[1]

    @property
    def q_mat(self):
        """State noise covariance sigma @ sigma.T."""
        return self.sigma @ self.sigma.T


@dataclass(frozen=True)
class FilterOutput:
    """Kalman-Bucy conditional means and covariances on the grid nodes."""

    grid: TimeGrid
    means: np.ndarray  # (n_steps + 1, d)
    covs: np.ndarray  # (n_steps + 1, d, d)

    def __post_init__(self):
        covs = self.covs
        sym_gap = np.max(np.abs(covs - np.swapaxes(covs, -1, -2)))
        if sym_gap > 1e-9:
            raise ValidationError(
                f"covariance path asymmetric by {sym_gap:.3e}"
            )
        w = np.linalg.eigvalsh(covs)
        floor = -1e-9 * max(float(w.max(initial=0.0)), 1.0)
        if float(w.min(initial=0.0)) < floor:
            raise ValidationError("covariance path is not PSD")


@dataclass(frozen=True)
class DualLqSolution:
    """Optimal dual control and its quadratic cost for one probe vector."""

    grid: TimeGrid
    y_path: np.ndarray  # (n_steps + 1, d)
    u_path: np.ndarray  # (n_steps + 1, m) feedback control at the nodes
    cost: float

    def __post_init__(self):
        if self.cost < 0.0:
            raise ValidationError(f"dual cost must be >= 0, got {self.cost}")


@dataclass(frozen=True)
class SmootherOutput:
    """Filtered and smoothed means with the minimum-energy certificate."""

    grid: TimeGrid
    xhat: np.ndarray  # (n_steps + 1, d) forward filtered path
    xopt: np.ndarray  # (n_steps + 1, d) backward optimal path
    vopt: np.ndarray  # (n_steps + 1, d) optimal disturbance at the nodes

    def __post_init__(self):
        if not np.array_equal(self.xhat[-1], self.xopt[-1]):
            raise ValidationError(
                "smoothed path must end at the filtered terminal mean"
            )


def simulate_lg(model, grid, rng):
    """Euler-Maruyama draw of the signal and observation increments.

    Returns (states, zpath): the (n_steps + 1, d) signal at the nodes
    and the observation increments as an ObservationPath.  All
    randomness comes from a single generator in a fixed order: initial
    state, then the full state-noise block, then the full
    observation-noise block.  Identical (seed, stream) inputs therefore
    reproduce the draw bit for bit.
    """
    if not isinstance(grid, TimeGrid):
        raise ValidationError("grid must be a TimeGrid")
    if not isinstance(rng, SeededRng):
        raise ValidationError("rng must be a SeededRng")
    d, m, dt, n = model.d, model.m, grid.dt, grid.n_steps
    gen = rng.generator()
    x0 = model.m0 + psd_sqrt(model.sigma0) @ gen.standard_normal(d)
    db = gen.standard_normal((n, d)) * np.sqrt(dt)
    dw = gen.standard_normal((n, m)) @ spd_factor(model.r_cov).T * np.sqrt(dt)
    states = np.empty((n + 1, d))
    states[0] = x0
    at = model.a_mat.T
    sig = model.sigma
    for k in range(n):
        states[k + 1] = states[k] + at @ states[k] * dt + sig @ db[k]
    dz = states[:-1] @ model.h_mat * dt + dw
    return states, ObservationPath(grid, dz)


def solve_dre(model, grid):
    """Riccati covariance flow on the grid nodes, from sigma0 forward.

    Fourth-order fixed-step integration with symmetrization after each
    step; entries leaving the finite range raise an integration error.
    """
    g = model.h_mat @ np.linalg.solve(model.r_cov, model.h_mat.T)
    q = model.q_mat
    at = model.a_mat.T
    dt = grid.dt

    def rhs(sig):
        return at @ sig + sig @ model.a_mat + q - sig @ g @ sig

    n = grid.n_steps
    covs = np.empty((n + 1, model.d, model.d))
    covs[0] = model.sigma0
    cur = model.sigma0.copy()
    # Overflow on the way to the finite check is the expected failure
    # mode; the raised error carries the step, so keep numpy quiet.
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            k1 = rhs(cur)
            k2 = rhs(cur + 0.5 * dt * k1)
            k3 = rhs(cur + 0.5 * dt * k2)
            k4 = rhs(cur + dt * k3)
            cur = cur + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            cur = 0.5 * (cur + cur.T)
            if not np.all(np.isfinite(cur)):
                raise IntegrationDivergedError(
                    k + 1, f"covariance flow diverged at step {k + 1}"
                )
            covs[k + 1] = cur
    return covs


def _filter_means(model, covs, zpath):
    """Mean recursion given a precomputed covariance path.

    Per step the deterministic drift is advanced by the fourth-order
    one-step matrix for a_mat.T while the innovation enters as an
    additive left-endpoint increment, so when h_mat = 0 the recursion
    reduces exactly to the generic integrator on dm/dt = a_mat.T m.
    """
    grid = zpath.grid
    if covs.shape[0] != grid.n_steps + 1:
        raise GridMismatchError("covariance path does not match the grid")
    dt, n, d = grid.dt, grid.n_steps, model.d
    h_rinv = np.linalg.solve(model.r_cov, model.h_mat.T).T  # H R^{-1}, (d, m)
    at_step = rk4_linear_step_matrix(model.a_mat.T, dt)
    ht = model.h_mat.T
    means = np.empty((n + 1, d))
    means[0] = model.m0
    dz = zpath.dz
    for k in range(n):
        gain = covs[k] @ h_rinv
        innov = dz[k] - ht @ means[k] * dt
        means[k + 1] = at_step @ means[k] + gain @ innov
    return means


def kalman_bucy(model, zpath, covs=None):
    """Conditional mean and covariance along one observation record.

    covs optionally supplies the solve_dre output for zpath's grid, so a
    batch of records over the same grid pays for the Riccati sweep once.
    """
    if covs is None:
        covs = solve_dre(model, zpath.grid)
    means = _filter_means(model, covs, zpath)
    return FilterOutput(zpath.grid, means, covs)


def _control_nodes(u, grid, m):
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 1:
        if m != 1:
            raise DimensionError(
                f"flat control requires observation dimension 1, model has {m}"
            )
        arr = arr[:, None]
    if arr.shape != (grid.n_steps + 1, m):
        raise GridMismatchError(
            f"control must be ({grid.n_steps + 1}, {m}) node values, "
            f"got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("control contains non-finite entries")
    return arr


def mv_cost(model, u, f, grid):
    """Quadratic cost of a dual control steering the probe f backward.

    The backward state solves -dy/dt = a_mat y + h_mat u with y(T) = f;
    the cost is the prior term plus the trapezoid rule applied to the
    running integrand |y|^2_Q + |u|^2_R on the grid nodes.
    """
    f = _as_vector("f", f, model.d)
    u = _control_nodes(u, grid, model.m)
    y = affine_backward(model.a_mat, model.h_mat, u, f, grid)
    q = model.q_mat
    vals = np.einsum("ni,ij,nj->n", y, q, y)
    vals = vals + np.einsum("ni,ij,nj->n", u, model.r_cov, u)
    running = float(np.trapezoid(vals, dx=grid.dt))
    return quad_form(model.sigma0, y[0]) + running


def dual_lq_optimal(model, f, grid):
    """Closed-loop optimal control for the dual quadratic problem.

    Integrates the feedback-closed backward equation using the Riccati
    flow from solve_dre, linearly interpolated between its nodes, and
    reports the achieved cost via mv_cost on the resulting control.
    """
    f = _as_vector("f", f, model.d)
    covs = solve_dre(model, grid)
    h_rinv = np.linalg.solve(model.r_cov, model.h_mat.T).T  # H R^{-1}
    gain_path = covs @ h_rinv  # (n+1, d, m); feedback u = -gain.T y... see below
    nodes = grid.nodes()
    t0, dt, n = grid.t0, grid.dt, grid.n_steps
    a = model.a_mat
    g = h_rinv @ model.h_mat.T  # H R^{-1} H^T, (d, d)

    def sigma_at(t):
        s = (t - t0) / dt
        i = min(int(np.floor(s)), n - 1)
        w = s - i
        return (1.0 - w) * covs[i] + w * covs[i + 1]

    # Closed loop: -dy/dt = (A - H R^{-1} H^T Sigma_t) y, integrated backward.
    def closed_rhs(t, y):
        return (g @ sigma_at(t) - a) @ y

    y = integrate_ode(closed_rhs, grid, f, direction="backward")
    # Feedback law u = -R^{-1} H^T Sigma y; gain_path[k].T supplies the map.
    u_opt = -np.einsum("nim,ni->nm", gain_path, y)
    cost = mv_cost(model, u_opt, f, grid)
    return DualLqSolution(grid, y, u_opt, cost)


def lg_estimator(y0, m0, u, zpath):
    """Linear estimate produced by a dual control along one observation.

    The stochastic integral uses the left endpoint of each step, so the
    node value u_k multiplies the increment over [t_k, t_{k+1}).
    """
    y0 = np.asarray(y0, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    grid = zpath.grid
    u = _control_nodes(u, grid, zpath.m)
    return float(y0 @ m0 - np.sum(u[:-1] * zpath.dz))


def filter_from_dual(model, f, zpath):
    """Evaluate f . m_T by running the dual optimal control forward.

    Composes dual_lq_optimal with lg_estimator; by the duality this
    equals the probe applied to the Kalman-Bucy terminal mean up to
    discretization error.
    """
    sol = dual_lq_optimal(model, f, zpath.grid)
    return lg_estimator(sol.y_path[0], model.m0, sol.u_path, zpath)


def min_energy_cost(model, v, x0, zdot, grid):
    """Energy functional of a disturbance against a smooth observation.

    v and zdot are node arrays; x0 is the trajectory's starting point.
    The trajectory follows dx/dt = a_mat.T x + sigma v from x0, and the
    cost adds the prior misfit, the disturbance energy, and the
    whitened output misfit, all by the trapezoid rule.
    """
    d, m = model.d, model.m
    x0 = _as_vector("x0", x0, d)
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None] if d == 1 else v
    if v.shape != (grid.n_steps + 1, d):
        raise GridMismatchError(
            f"disturbance must be ({grid.n_steps + 1}, {d}), got {v.shape}"
        )
    zd = np.asarray(zdot, dtype=float)
    if zd.ndim == 1:
        zd = zd[:, None] if m == 1 else zd
    if zd.shape != (grid.n_steps + 1, m):
        raise GridMismatchError(
            f"zdot must be ({grid.n_steps + 1}, {m}), got {zd.shape}"
        )
    try:
        s0_chol = spd_factor(model.sigma0)
    except NotPositiveDefiniteError as err:
        raise SingularPriorError(
            "prior covariance must be invertible for the energy functional"
        ) from err
    nodes = grid.nodes()
    at = model.a_mat.T

    def v_of_t(t):
        return np.array([np.interp(t, nodes, v[:, j]) for j in range(d)])

    x = integrate_ode(
        lambda t, y: at @ y + model.sigma @ v_of_t(t), grid, x0
    )
    dev = np.linalg.solve(s0_chol, x[0] - model.m0)
    prior_term = float(dev @ dev)
    misfit = zd - x @ model.h_mat
    vals = np.einsum("ni,ni->n", v, v)
    vals = vals + np.einsum(
        "ni,ij,nj->n", misfit, np.linalg.inv(model.r_cov), misfit
    )
    return prior_term + float(np.trapezoid(vals, dx=grid.dt))


def rts_smooth(model, zdot, grid):
    """Two-pass fixed-interval smoother for a smooth observation rate.

    Forward pass: the filter mean driven by zdot via a second-order
    predictor-corrector step.  Backward pass: the smoothing equation
    driven by the stored forward means and covariances, started exactly
    at the forward terminal mean.  The optimal disturbance certificate
    sigma.T Sigma^{-1} (smoothed - filtered) is returned at the nodes.
    """
    m = model.m
    zd = np.asarray(zdot, dtype=float)
    if zd.ndim == 1:
        zd = zd[:, None] if m == 1 else zd
    if zd.shape != (grid.n_steps + 1, m):
        raise GridMismatchError(
            f"zdot must be ({grid.n_steps + 1}, {m}), got {zd.shape}"
        )
    covs = solve_dre(model, grid)
    n, d, dt = grid.n_steps, model.d, grid.dt
    at = model.a_mat.T
    h_rinv = np.linalg.solve(model.r_cov, model.h_mat.T).T
    ht = model.h_mat.T

    def fwd_rhs(k, x):
        gain = covs[k] @ h_rinv
        return at @ x + gain @ (zd[k] - ht @ x)

    filtered = np.empty((n + 1, d))
    filtered[0] = model.m0
    for k in range(n):
        # Heun step with endpoint coefficient evaluations.
        f1 = fwd_rhs(k, filtered[k])
        f2 = fwd_rhs(k + 1, filtered[k] + dt * f1)
        filtered[k + 1] = filtered[k] + 0.5 * dt * (f1 + f2)

    q = model.q_mat
    w = np.linalg.eigvalsh(covs)
    if np.any(w[:, -1] > 1e12 * np.maximum(w[:, 0], 0.0)) or np.any(
        w[:, 0] <= 0.0
    ):
        bad = int(
            np.argmax(
                (w[:, 0] <= 0.0)
                | (w[:, -1] > 1e12 * np.maximum(w[:, 0], 0.0))
            )
        )
        raise SingularCovarianceError(
            bad, f"covariance at node {bad} is too ill-conditioned to invert"
        )
    sol_q = np.stack([np.linalg.solve(covs[k], q.T).T for k in range(n + 1)])

    def back_rhs(k, x):
        return at @ x + sol_q[k] @ (x - filtered[k])

    smoothed = np.empty((n + 1, d))
    smoothed[n] = filtered[n]
    for k in range(n, 0, -1):
        b1 = back_rhs(k, smoothed[k])
        b2 = back_rhs(k - 1, smoothed[k] - dt * b1)
        smoothed[k - 1] = smoothed[k] - 0.5 * dt * (b1 + b2)

    dev = smoothed - filtered
    v_opt = np.empty((n + 1, d))
    st = model.sigma.T
    for k in range(n + 1):
        v_opt[k] = st @ np.linalg.solve(covs[k], dev[k])
    return SmootherOutput(grid, filtered, smoothed, v_opt)


def min_energy_lsq(model, zdot, grid):
    """Direct normal-equations solve of the discretized energy problem.

    Crank-Nicolson in the dynamics: the disturbance over step k is
    eliminated through the defect (x_{k+1} - x_k)/dt - a_mat.T (x_k +
    x_{k+1})/2, weighted by the inverse state noise covariance, and the
    output misfit is collocated at step midpoints.  Returns the node
    trajectory and the attained quadratic cost.  Requires sigma (and
    sigma0) invertible so both weights exist.
    """
    m = model.m
    zd = np.asarray(zdot, dtype=float)
    if zd.ndim == 1:
        zd = zd[:, None] if m == 1 else zd
    if zd.shape != (grid.n_steps + 1, m):
        raise GridMismatchError(
            f"zdot must be ({grid.n_steps + 1}, {m}), got {zd.shape}"
        )
    d, n, dt = model.d, grid.n_steps, grid.dt
    q = model.q_mat
    try:
        spd_factor(q)
        s0_chol = spd_factor(model.sigma0)
    except NotPositiveDefiniteError as err:
        raise SingularPriorError(
            "least-squares route needs invertible sigma and sigma0"
        ) from err
    q_inv = np.linalg.inv(q)
    s0_inv = np.linalg.inv(model.sigma0)
    r_inv = np.linalg.inv(model.r_cov)
    at = model.a_mat.T
    c0 = -np.eye(d) / dt - 0.5 * at  # coefficient of x_k in the defect
    c1 = np.eye(d) / dt - 0.5 * at  # coefficient of x_{k+1}
    h = model.h_mat
    # Per-step quadratic forms, assembled into a block-tridiagonal system.
    big = scipy.sparse.lil_matrix(((n + 1) * d, (n + 1) * d))
    rhs = np.zeros((n + 1) * d)
    big[0:d, 0:d] = s0_inv
    rhs[0:d] = s0_inv @ model.m0
    w00 = c0.T @ q_inv @ c0
    w01 = c0.T @ q_inv @ c1
    w11 = c1.T @ q_inv @ c1
    hrh = 0.25 * (h @ r_inv @ h.T)  # midpoint output misfit, x-average weight
    for k in range(n):
        i0, i1 = k * d, (k + 1) * d
        big[i0:i0 + d, i0:i0 + d] += dt * (w00 + hrh)
        big[i0:i0 + d, i1:i1 + d] += dt * (w01 + hrh)
        big[i1:i1 + d, i0:i0 + d] += dt * (w01.T + hrh)
        big[i1:i1 + d, i1:i1 + d] += dt * (w11 + hrh)
        zmid = 0.5 * (zd[k] + zd[k + 1])
        pull = 0.5 * dt * (h @ r_inv @ zmid)
        rhs[i0:i0 + d] += pull
        rhs[i1:i1 + d] += pull
    x_flat = scipy.sparse.linalg.spsolve(big.tocsc(), rhs)
    x = x_flat.reshape(n + 1, d)
    # Attained cost, evaluated with the same discrete quadratures.
    dev0 = np.linalg.solve(s0_chol, x[0] - model.m0)
    cost = float(dev0 @ dev0)
    for k in range(n):
        defect = c0 @ x[k] + c1 @ x[k + 1]
        cost += dt * float(defect @ q_inv @ defect)
        xmid = 0.5 * (x[k] + x[k + 1])
        miss = 0.5 * (zd[k] + zd[k + 1]) - h.T @ xmid
        cost += dt * float(miss @ r_inv @ miss)
    return x, cost


def static_mv(m0, sigma0, h_mat, r_cov, z):
    """One-shot Bayes update as prior mean plus gain times innovation."""
    m0 = np.asarray(m0, dtype=float)
    sigma0 = _as_matrix("sigma0", sigma0)
    h = _as_matrix("h_mat", h_mat)
    r = _as_matrix("r_cov", r_cov)
    z = np.asarray(z, dtype=float)
    s = h.T @ sigma0 @ h + r
    gain = sigma0 @ np.linalg.solve(s.T, h.T).T  # Sigma0 H S^{-1}
    return m0 + gain @ (z - h.T @ m0)


def static_ml(m0, sigma0, h_mat, r_cov, z):
    """Regularized least-squares estimate in information form."""
    m0 = np.asarray(m0, dtype=float)
    sigma0 = _as_matrix("sigma0", sigma0)
    h = _as_matrix("h_mat", h_mat)
    r = _as_matrix("r_cov", r_cov)
    z = np.asarray(z, dtype=float)
    try:
        spd_factor(sigma0)
    except NotPositiveDefiniteError as err:
        raise SingularPriorError(
            "information form needs an invertible prior covariance"
        ) from err
    s0_inv = np.linalg.inv(sigma0)
    h_rinv = np.linalg.solve(r, h.T).T
    info = s0_inv + h_rinv @ h.T
    return np.linalg.solve(info, s0_inv @ m0 + h_rinv @ z)


def _mc_chunk_sizes(n_paths):
    sizes = [_MC_CHUNK] * (n_paths // _MC_CHUNK)
    if n_paths % _MC_CHUNK:
        sizes.append(n_paths % _MC_CHUNK)
    return sizes


def lg_mse_mc(model, controls, f, grid, n_paths, rng, threads=1):
    """Monte Carlo squared-error summaries for a family of dual controls.

    controls maps names to node arrays; every control is evaluated on
    the SAME simulated paths so cross-control comparisons share noise.
    Paths are drawn in fixed chunks with one substream per chunk and
    reduced in chunk order, making the result independent of the
    thread count.  Returns {name: (mean, se)} plus the path count.
    """
    f = _as_vector("f", f, model.d)
    names = list(controls)
    mat = {
        name: _control_nodes(controls[name], grid, model.m) for name in names
    }
    n_paths = int(n_paths)
    if n_paths < 2:
        raise ValidationError("n_paths must be at least 2")
    d, m, n, dt = model.d, model.m, grid.n_steps, grid.dt
    at_step = np.eye(d) + model.a_mat.T * dt
    sig = model.sigma
    ht = model.h_mat.T
    r_chol = spd_factor(model.r_cov)
    s0_sqrt = psd_sqrt(model.sigma0)
    sq_dt = np.sqrt(dt)
    sizes = _mc_chunk_sizes(n_paths)

    def run_chunk(args):
        chunk_id, size = args
        gen = rng.generator(chunk_id)
        x = model.m0 + gen.standard_normal((size, d)) @ s0_sqrt.T
        # Accumulate -sum u_k . dZ_k while stepping the signal forward.
        acc = {name: np.zeros(size) for name in names}
        for k in range(n):
            db = gen.standard_normal((size, d)) * sq_dt
            dw = gen.standard_normal((size, m)) @ r_chol.T * sq_dt
            dz = (x @ model.h_mat) * dt + dw
            for name in names:
                acc[name] -= dz @ mat[name][k]
            x = x @ at_step.T + db @ sig.T
        return x @ f, acc

    # y0 depends on the control; precompute it once per control.
    y0 = {
        name: affine_backward(model.a_mat, model.h_mat, mat[name], f, grid)[0]
        for name in names
    }
    base = {name: float(y0[name] @ model.m0) for name in names}

    jobs = list(enumerate(sizes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, jobs))
    else:
        results = [run_chunk(job) for job in jobs]

    sums = {name: 0.0 for name in names}
    sq_sums = {name: 0.0 for name in names}
    for target, accs in results:
        for name in names:
            err = target - (base[name] + accs[name])
            err2 = err * err
            sums[name] += float(err2.sum())
            sq_sums[name] += float((err2 * err2).sum())
    out = {}
    for name in names:
        mean = sums[name] / n_paths
        var = max(sq_sums[name] / n_paths - mean * mean, 0.0)
        se = float(np.sqrt(var / n_paths))
        out[name] = (mean, se)
    return out
