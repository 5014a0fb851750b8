"""Finite-state hidden Markov models with white-noise observations.

A chain on {0, ..., d-1} (reported 1..d in external output) with
transition-rate matrix ``rate``, observed through the per-state read-out
rows of ``h_mat`` in additive Gaussian noise with covariance ``r_cov``.
The module covers exact jump-chain simulation, observation synthesis,
the marginal-law flow, the unnormalized/normalized conditional filter,
the carre du champ operator, and the Monte Carlo estimate of the
filter's terminal mean squared error.

General observation noise is handled by pre-whitening: the filter
recursion is run on (L^{-1} dZ, H L^{-T}) where r_cov = L L^T, which
reduces every update to the identity-noise form.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from duality_lab.errors import (
    DimensionError,
    FilterDegenerateError,
    GridMismatchError,
    NegativeRateError,
    NoiseNotSpdError,
    NotPositiveDefiniteError,
    NumericalError,
    PriorSimplexError,
    RowSumError,
    ValidationError,
)
from duality_lab.numkit import (
    ObservationPath,
    SeededRng,
    TimeGrid,
    integrate_ode,
    rk4_linear_step_matrix,
    sample_gaussian_increments,
    spd_factor,
)

_MC_CHUNK = 2048
_MAX_JUMP_ROUNDS = 100000


@dataclass(frozen=True)
class FiniteHmm:
    """Rate matrix, per-state read-out rows, noise covariance, prior.

    Construction only coerces shapes; call validate_hmm for the full
    invariant check (some operations deliberately accept relaxations,
    e.g. a zero noise covariance in simulate_observations).
    """

    rate: np.ndarray  # (d, d)
    h_mat: np.ndarray  # (d, m), row x holds the read-out vector of state x
    r_cov: np.ndarray  # (m, m)
    prior: np.ndarray  # (d,)

    def __post_init__(self):
        rate = np.asarray(self.rate, dtype=float)
        if rate.ndim != 2 or rate.shape[0] != rate.shape[1]:
            raise DimensionError(f"rate must be square, got {rate.shape}")
        d = rate.shape[0]
        h = np.asarray(self.h_mat, dtype=float)
        if h.ndim != 2 or h.shape[0] != d:
            raise DimensionError(
                f"h_mat must have one row per state ({d}), got {h.shape}"
            )
        m = h.shape[1]
        r = np.asarray(self.r_cov, dtype=float)
        if r.shape != (m, m):
            raise DimensionError(f"r_cov must be ({m}, {m}), got {r.shape}")
        prior = np.asarray(self.prior, dtype=float)
        if prior.shape != (d,):
            raise DimensionError(f"prior must have length {d}")
        for name, val in (
            ("rate", rate), ("h_mat", h), ("r_cov", r), ("prior", prior),
        ):
            if not np.all(np.isfinite(val)):
                raise ValidationError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, val)

    @property
    def d(self):
        return self.rate.shape[0]

    @property
    def m(self):
        return self.h_mat.shape[1]


@dataclass(frozen=True)
class JumpPath:
    """Piecewise-constant chain trajectory: state per holding interval."""

    times: np.ndarray  # strictly increasing jump times, times[0] = 0
    states: np.ndarray  # int state per holding interval
    horizon: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=int)
        if times.ndim != 1 or states.shape != times.shape:
            raise DimensionError("times and states must be equal-length 1-d")
        if times.size == 0 or times[0] != 0.0:
            raise ValidationError("jump times must start at 0")
        if np.any(np.diff(times) <= 0.0):
            raise ValidationError("jump times must be strictly increasing")
        if times[-1] > self.horizon:
            raise ValidationError("jump times must stay within the horizon")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def state_at(self, t):
        """State occupied at time t (right-continuous in the jumps)."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.states[idx])


@dataclass(frozen=True)
class BeliefPath:
    """Unnormalized and normalized conditional distributions on the grid."""

    grid: TimeGrid
    unnormalized: np.ndarray  # (n_steps + 1, d)
    normalized: np.ndarray  # (n_steps + 1, d)
    clip_total: float  # total negative mass removed before normalization

    def __post_init__(self):
        if np.any(self.unnormalized < 0.0):
            raise ValidationError("unnormalized beliefs must be nonnegative")
        sums = self.normalized.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("normalized beliefs must sum to 1")


def validate_hmm(hmm):
    """Check every structural invariant, raising a named error per breach."""
    rate, prior, r = hmm.rate, hmm.prior, hmm.r_cov
    off = rate - np.diag(np.diag(rate))
    if np.any(off < 0.0):
        x, y = np.argwhere(off < 0.0)[0]
        raise NegativeRateError(
            f"rate[{x},{y}] = {rate[x, y]} is negative off-diagonal"
        )
    row_sums = rate.sum(axis=1)
    if np.max(np.abs(row_sums)) > 1e-12:
        x = int(np.argmax(np.abs(row_sums)))
        raise RowSumError(f"row {x} of rate sums to {row_sums[x]}, not 0")
    if np.any(prior < 0.0):
        raise PriorSimplexError("prior has negative entries")
    if abs(float(prior.sum()) - 1.0) > 1e-12:
        raise PriorSimplexError(f"prior sums to {float(prior.sum())}, not 1")
    try:
        spd_factor(r)
    except (NotPositiveDefiniteError, ValidationError) as err:
        raise NoiseNotSpdError(
            "r_cov must be symmetric positive definite"
        ) from err


def sample_ctmc(hmm, big_t, rng):
    """Exact jump-chain draw on [0, big_t].

    Holding time in state x is exponential with rate -rate[x, x]; the
    next state is chosen with probability rate[x, y] / (-rate[x, x]).
    An all-zero row is absorbing.  Draw order per jump: holding time,
    then next-state uniform; the initial state consumes one uniform.
    """
    if not isinstance(rng, SeededRng):
        raise ValidationError("rng must be a SeededRng")
    big_t = float(big_t)
    if not big_t > 0.0:
        raise ValidationError("horizon must be positive")
    gen = rng.generator()
    cum_prior = np.cumsum(hmm.prior)
    x = min(
        int(np.searchsorted(cum_prior, gen.random(), side="right")),
        hmm.d - 1,
    )
    times = [0.0]
    states = [x]
    t = 0.0
    rate = hmm.rate
    while True:
        out_rate = -rate[x, x]
        if out_rate <= 0.0:
            break
        t += gen.exponential(1.0 / out_rate)
        if t >= big_t:
            break
        probs = rate[x].copy()
        probs[x] = 0.0
        cum = np.cumsum(probs / out_rate)
        x = min(int(np.searchsorted(cum, gen.random(), side="right")), hmm.d - 1)
        times.append(t)
        states.append(x)
    return JumpPath(np.array(times), np.array(states), big_t)


def states_on_grid(path, grid):
    """Left-endpoint state index for every step of the grid."""
    if grid.t1 > path.horizon + 1e-12 or grid.t0 < 0.0:
        raise GridMismatchError("grid extends past the simulated horizon")
    nodes = grid.nodes()
    idx = np.searchsorted(path.times, nodes, side="right") - 1
    return path.states[idx]


def simulate_observations(hmm, path, grid, rng):
    """Observation increments along one chain trajectory.

    The state enters at the left endpoint of each step; the noise block
    comes from sample_gaussian_increments, so a zero r_cov produces the
    noiseless increments h(X_t) dt exactly.
    """
    node_states = states_on_grid(path, grid)
    h_vals = hmm.h_mat[node_states[:-1]]  # (n_steps, m)
    dw = sample_gaussian_increments(rng, hmm.m, grid, hmm.r_cov)
    return ObservationPath(grid, h_vals * grid.dt + dw)


def forward_kolmogorov(hmm, grid):
    """Marginal law at every node, renormalized defensively.

    The flow conserves mass analytically (rate rows sum to zero); any
    per-step mass drift beyond 1e-9 signals a numerical problem and
    raises instead of being silently scaled away.
    """
    rate_t = hmm.rate.T
    path = integrate_ode(lambda t, mu: rate_t @ mu, grid, hmm.prior)
    masses = path.sum(axis=1)
    drift = np.abs(np.diff(masses))
    if drift.size and float(drift.max()) > 1e-9:
        step = int(np.argmax(drift)) + 1
        raise NumericalError(
            f"marginal-law mass drifted by {drift.max():.3e} at step {step}"
        )
    return path / masses[:, None]


def _whitened(hmm):
    """(whitened H, lower factor L) with r_cov = L L^T; identity shortcut."""
    r = hmm.r_cov
    if np.array_equal(r, np.eye(hmm.m)):
        return hmm.h_mat, None
    low = spd_factor(r)
    h_w = scipy.linalg.solve_triangular(low, hmm.h_mat.T, lower=True).T
    return h_w, low


def zakai_filter(hmm, zpath):
    """Unnormalized belief recursion along one observation record.

    Per step the drift is applied through the one-step matrix of the
    marginal-law flow and the whitened observation increment enters as
    a left-endpoint multiplicative kick on the pre-step belief:
    sigma_{k+1} = sigma_k P + sigma_k o (H~ dz~_k).  With h_mat = 0 the
    recursion therefore reproduces forward_kolmogorov exactly.
    Negative entries are clipped to zero before normalization and the
    clipped magnitude is accumulated into clip_total.
    """
    grid = zpath.grid
    if zpath.m != hmm.m:
        raise DimensionError(
            f"observation dimension {zpath.m} does not match model {hmm.m}"
        )
    h_w, low = _whitened(hmm)
    dz = zpath.dz
    if low is not None:
        dz = scipy.linalg.solve_triangular(low, dz.T, lower=True).T
    step_m = rk4_linear_step_matrix(hmm.rate, grid.dt)  # right-multiplier
    n, d = grid.n_steps, hmm.d
    unnorm = np.empty((n + 1, d))
    normed = np.empty((n + 1, d))
    sig = hmm.prior.astype(float).copy()
    clip_total = 0.0
    for k in range(n + 1):
        neg = sig < 0.0
        if np.any(neg):
            clip_total += float(-sig[neg].sum())
            sig = np.where(neg, 0.0, sig)
        mass = float(sig.sum())
        if mass < 1e-300:
            raise FilterDegenerateError(
                k, f"belief mass underflowed at step {k}"
            )
        unnorm[k] = sig
        normed[k] = sig / mass
        if k < n:
            sig = sig @ step_m + sig * (h_w @ dz[k])
    return BeliefPath(grid, unnorm, normed, clip_total)


def generator_apply(hmm, f):
    """Action of the rate matrix on a function of the state."""
    return hmm.rate @ np.asarray(f, dtype=float)


def carre_du_champ(hmm, f):
    """Local fluctuation form: (Gamma f)(x) = sum_y rate(x,y) (f(x)-f(y))^2.

    The diagonal term vanishes identically, so no masking is needed;
    the result also satisfies Gamma f = A(f^2) - 2 f o (A f) with A the
    rate matrix acting on functions.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (hmm.d,):
        raise DimensionError(f"f must have length {hmm.d}")
    diffs = f[:, None] - f[None, :]
    return np.einsum("xy,xy->x", hmm.rate, diffs * diffs)


def _sample_states_batch(gen, hmm, nodes, big_t, size):
    """Vectorized jump-chain draw: state index per node for `size` paths.

    Round r draws one holding time and one next-state uniform for every
    path (finished paths burn their draws unchanged), keeping the draw
    count independent of the realized jump structure per round.
    """
    d = hmm.d
    rate = hmm.rate
    out_rates = -np.diag(rate)
    jump_probs = rate.copy()
    np.fill_diagonal(jump_probs, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cum_rows = np.cumsum(
            jump_probs / np.where(out_rates > 0.0, out_rates, 1.0)[:, None],
            axis=1,
        )
    cum_prior = np.cumsum(hmm.prior)
    cur_x = np.minimum(
        np.searchsorted(cum_prior, gen.random(size), side="right"), d - 1
    )
    cur_t = np.zeros(size)
    jump_t = [cur_t.copy()]
    jump_x = [cur_x.copy()]
    for _ in range(_MAX_JUMP_ROUNDS):
        rates = out_rates[cur_x]
        with np.errstate(divide="ignore"):
            hold = np.where(
                rates > 0.0,
                -np.log1p(-gen.random(size)) / np.where(rates > 0.0, rates, 1.0),
                np.inf,
            )
        cur_t = cur_t + hold
        if np.all(cur_t >= big_t):
            break
        u2 = gen.random(size)
        nxt = (u2[:, None] >= cum_rows[cur_x]).sum(axis=1)
        nxt = np.minimum(nxt, d - 1)
        alive = cur_t < big_t
        cur_x = np.where(alive, nxt, cur_x)
        jump_t.append(np.where(alive, cur_t, np.inf))
        jump_x.append(cur_x.copy())
    else:
        raise NumericalError("jump simulation exceeded the round limit")
    t_mat = np.stack(jump_t, axis=1)
    x_mat = np.stack(jump_x, axis=1)
    out = np.empty((size, nodes.size), dtype=int)
    for i in range(size):
        idx = np.searchsorted(t_mat[i], nodes, side="right") - 1
        out[i] = x_mat[i, idx]
    return out


def _mc_chunk_sizes(n_paths):
    sizes = [_MC_CHUNK] * (n_paths // _MC_CHUNK)
    if n_paths % _MC_CHUNK:
        sizes.append(n_paths % _MC_CHUNK)
    return sizes


def _zakai_terminal_batch(hmm, h_w, step_m, node_states, dz_w):
    """Normalized terminal belief for a batch of whitened observations."""
    size, n_plus_1 = node_states.shape
    n = n_plus_1 - 1
    sig = np.tile(hmm.prior.astype(float), (size, 1))
    for k in range(n):
        kick = dz_w[:, k, :] @ h_w.T  # (size, d): per-state h~ . dz~
        sig = sig @ step_m + sig * kick
        np.maximum(sig, 0.0, out=sig)
        mass = sig.sum(axis=1)
        if np.any(mass < 1e-300):
            raise FilterDegenerateError(
                k + 1, f"belief mass underflowed at step {k + 1}"
            )
        sig /= mass[:, None]
    return sig


def conditional_mse_mc(hmm, f, big_t, n_paths, rng, *, n_steps=1000, threads=1):
    """Monte Carlo terminal filter error: mean and SE of |f(X_T) - pi_T(f)|^2.

    Vectorizes the per-path pipeline (jump chain, whitened observation
    increments, belief recursion) over fixed-size chunks, one substream
    per chunk, reduced in chunk order so the result is independent of
    the thread count.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (hmm.d,):
        raise DimensionError(f"f must have length {hmm.d}")
    n_paths = int(n_paths)
    if n_paths < 2:
        raise ValidationError("n_paths must be at least 2")
    grid = TimeGrid(0.0, float(big_t), int(n_steps))
    nodes = grid.nodes()
    dt = grid.dt
    sq_dt = np.sqrt(dt)
    h_w, _ = _whitened(hmm)
    step_m = rk4_linear_step_matrix(hmm.rate, dt)
    m = hmm.m

    def run_chunk(args):
        chunk_id, size = args
        gen = rng.generator(chunk_id)
        node_states = _sample_states_batch(gen, hmm, nodes, grid.t1, size)
        dw = gen.standard_normal((size, grid.n_steps, m)) * sq_dt
        h_path = h_w[node_states[:, :-1]]  # (size, n, m), whitened read-out
        dz_w = h_path * dt + dw
        pi_t = _zakai_terminal_batch(hmm, h_w, step_m, node_states, dz_w)
        err = f[node_states[:, -1]] - pi_t @ f
        err2 = err * err
        return float(err2.sum()), float((err2 * err2).sum())

    jobs = list(enumerate(_mc_chunk_sizes(n_paths)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, jobs))
    else:
        results = [run_chunk(job) for job in jobs]
    total = 0.0
    total_sq = 0.0
    for s, s2 in results:
        total += s
        total_sq += s2
    mean = total / n_paths
    var = max(total_sq / n_paths - mean * mean, 0.0)
    return mean, float(np.sqrt(var / n_paths))
