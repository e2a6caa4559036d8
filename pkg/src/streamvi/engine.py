"""Particle recursion engine.

Carries, per time step, N i.i.d. draws from the current variational
marginal together with three per-particle statistics: the cumulative
pair-term (h), its phi-gradient (g), and its theta-gradient (f).  New
statistics are self-normalized importance-sampling updates over the
previous particles, with weights proportional (within each row) to the
backward-kernel density over the previous proposal density.

Two update routes:

- full weights: the exact N x N weighted sums, O(N^2) per step;
- backward sampling: each row's weighted sum replaced by an average over
  M categorical index draws (shared across the three statistics), with
  the g-bracket centered by the freshly computed h statistic.  Indices
  come either from the explicit categorical row or from accept-reject
  proposals against an upper bound on the potential, O(N M) per step.

All weight arithmetic is in log space with per-row log-sum-exp
normalization.  Rows with zero total mass raise instead of silently
falling back to uniform.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import gaussian, gradients, models, variational as var
from .errors import DegenerateRow, MissingBound, NonFiniteStatistic
from .gaussian import GaussianNatural


@dataclass
class EngineConfig:
    n_particles: int = 100
    method: str = "full"            # full | categorical | accept_reject
    m_backward: int = 2
    cv_grad_phi: bool = True        # center h in the final phi-gradient estimator
    cv_gstat: bool | None = None    # center the g-bracket; default on for sampled modes
    clip_enabled: bool = False
    log_eps_minus: float = -30.0
    log_eps_plus: float = 30.0
    truncation_window: int = 2
    compute_grads: bool = True
    ar_proposal_cap_factor: int = 100  # accept-reject proposal budget = factor * N

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.m_backward < 1:
            raise ValueError("m_backward must be >= 1")
        if self.method not in ("full", "categorical", "accept_reject"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def gstat_centered(self) -> bool:
        if self.cv_gstat is None:
            return self.method != "full"
        return self.cv_gstat


@dataclass
class ParticleCloud:
    xi: np.ndarray                     # (N, d)
    h_stat: np.ndarray                 # (N,)
    g_stat: np.ndarray | None          # (N, dim_phi)
    f_stat: np.ndarray | None          # (N, dim_theta)
    log_q_marginal: np.ndarray         # (N,) log q_t(xi_i) under the sampler
    eta: GaussianNatural               # marginal the particles were drawn from
    t: int
    chain: gradients.MarginalChain | None = None  # context for phi-scores

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    def validate(self, tol: float = 1e-12) -> None:
        ref = gaussian.log_density_cross(self.eta.eta1[None], self.eta.eta2[None],
                                         self.xi)[0]
        if not np.allclose(ref, self.log_q_marginal, atol=tol, rtol=0):
            raise NonFiniteStatistic("cached marginal log-densities are stale")


@dataclass
class WeightMatrix:
    w: np.ndarray            # (N, N) rows sum to one
    log_unnorm: np.ndarray   # (N, N)


@dataclass
class EstimatorOutput:
    elbo: float
    grad_phi: np.ndarray | None
    grad_theta: np.ndarray | None


# ---------------------------------------------------------------------------
# Family runners: everything the engine needs from a variational family
# ---------------------------------------------------------------------------


class AmortizedRunner:
    """Streams the recurrent amortizer and exposes gradient hooks.

    The live state advances once per observation.  For each step the
    last ``window`` updates are re-executed under the current weights,
    which makes the sampled marginal, the kernel marginal, and their
    gradients all consistent values of one truncated function.
    """

    def __init__(self, params: var.AmortizerParams, window: int = 2,
                 compute_grads: bool = True):
        self.params = params
        self.window = window
        self.compute_grads = compute_grads
        self.layout = var.var_layout(params)
        self.a_live = np.zeros(params.hidden)
        self.hist: list[tuple[np.ndarray, np.ndarray]] = []  # (a_before, y) per step
        self.chain_cur: gradients.MarginalChain | None = None
        self.chain_prev: gradients.MarginalChain | None = None

    @property
    def dim_phi(self) -> int:
        return self.layout.total

    def set_params(self, params: var.AmortizerParams) -> None:
        self.params = params

    def begin_step(self, y_t: np.ndarray) -> None:
        y_t = np.asarray(y_t, dtype=np.float64)
        self.hist.append((self.a_live.copy(), y_t))
        if len(self.hist) > self.window + 1:
            self.hist.pop(0)
        self.a_live = var.advance(self.params, var.AmortizerState(a=self.a_live), y_t).a
        ys = [y for _, y in self.hist]
        boundaries = [a for a, _ in self.hist]
        k = min(self.window, len(self.hist)) if self.window > 0 else 0
        if k > 0:
            self.chain_cur = gradients.marginal_chain(
                self.params, boundaries[-k], ys[-k:], self.compute_grads)
        else:
            self.chain_cur = gradients.marginal_chain(
                self.params, self.a_live, [], self.compute_grads)
        if len(self.hist) >= 2:
            prev_hist = self.hist[:-1]
            kp = min(self.window, len(prev_hist)) if self.window > 0 else 0
            if kp > 0:
                self.chain_prev = gradients.marginal_chain(
                    self.params, prev_hist[-kp][0], [y for _, y in prev_hist[-kp:]],
                    self.compute_grads)
            else:
                self.chain_prev = gradients.marginal_chain(
                    self.params, prev_hist[-1][0], [], self.compute_grads)
        else:
            self.chain_prev = None

    def current_eta(self) -> GaussianNatural:
        return GaussianNatural(eta1=self.chain_cur.eta1, eta2=self.chain_cur.eta2)

    def kernel_marginal(self) -> GaussianNatural:
        return GaussianNatural(eta1=self.chain_prev.eta1, eta2=self.chain_prev.eta2)

    def potential_batch(self, xs: np.ndarray):
        return var.potential_params_batch(self.params, xs)

    def kernel_phi_contract(self, u1: np.ndarray, u2: np.ndarray,
                            pot_raw: np.ndarray, pot_acts) -> np.ndarray:
        """Map per-row kernel cotangents (u1, u2) to per-row phi-gradients.

        The kernel's natural parameters are eta_prev + eta~(xi_i); both
        routes receive the same cotangent.
        """
        out = gradients.marginal_cotangent_phi(self.chain_prev, u1, u2)
        raw_cots = var.natural_cotangent_to_raw(pot_raw, u1, u2, self.params.d_x,
                                                diag_softplus=False)
        pot_grads = var.mlp.vjp_params_batched(self.params.head_potential,
                                               None, raw_cots, acts=pot_acts)
        spec = self.layout.by_name["head_potential"]
        out[:, spec.offset:spec.offset + spec.size] += pot_grads
        return out

    def snapshot(self) -> dict:
        return {
            "a_live": self.a_live.copy(),
            "hist_a": np.stack([a for a, _ in self.hist]) if self.hist else None,
            "hist_y": np.stack([y for _, y in self.hist]) if self.hist else None,
        }

    def restore(self, snap: dict) -> None:
        self.a_live = snap["a_live"].copy()
        if snap["hist_a"] is None:
            self.hist = []
        else:
            self.hist = [(a.copy(), y.copy())
                         for a, y in zip(snap["hist_a"], snap["hist_y"])]


class ConjugateRunner:
    """Precomputed per-step marginals and affine potentials; no phi-gradients."""

    def __init__(self, family: var.ConjugateSequence):
        self.family = family
        self.t = -1
        self.compute_grads = False
        self.dim_phi = 0

    def begin_step(self, y_t: np.ndarray) -> None:
        self.t += 1

    def current_eta(self) -> GaussianNatural:
        return self.family.etas[self.t]

    def kernel_marginal(self) -> GaussianNatural:
        return self.family.etas[self.t - 1]

    def potential_batch(self, xs: np.ndarray):
        eta1, eta2 = self.family.potentials[self.t - 1].eta_batch(xs)
        return eta1, np.ascontiguousarray(eta2), None, None


# ---------------------------------------------------------------------------
# Cloud construction and weight computation
# ---------------------------------------------------------------------------


def init_cloud(model, runner, y0: np.ndarray, n: int, rng: np.random.Generator,
               dim_theta: int | None = None) -> ParticleCloud:
    """Sample the time-zero cloud and its base statistics.

    h_0 = log chi + log g_0 per particle; the phi-statistic starts at
    exactly zero and the theta-statistic at the gradient of h_0.
    """
    runner.begin_step(y0)
    eta = runner.current_eta()
    xi = gaussian.sample(eta, rng, n)
    log_q = gaussian.log_density_cross(eta.eta1[None], eta.eta2[None], xi)[0]
    h = models.log_init_batch(model, xi) + models.log_g_batch(model, xi, y0)
    g_stat = None
    f_stat = None
    if runner.compute_grads:
        g_stat = np.zeros((n, runner.dim_phi))
    if dim_theta is not None:
        f_stat = models.grad_theta_init_batch(model, xi, y0)
    chain = getattr(runner, "chain_cur", None)
    cloud = ParticleCloud(xi=xi, h_stat=h, g_stat=g_stat, f_stat=f_stat,
                          log_q_marginal=log_q, eta=eta, t=0, chain=chain)
    _check_finite(cloud)
    return cloud


@dataclass
class KernelBatch:
    """Per-new-particle backward-kernel quantities shared by all updates."""

    eta1: np.ndarray          # (N, d) eta_prev + eta~(xi_new_i)
    eta2: np.ndarray          # (N, d, d)
    log_kernel_cross: np.ndarray | None   # (N_new, N_prev) kernel log-densities
    log_pot_cross: np.ndarray | None      # (N_new, N_prev) potentials (clip applied)
    pot_eta1: np.ndarray
    pot_eta2: np.ndarray
    pot_raw: np.ndarray | None
    pot_acts: object | None


def build_kernel(runner, cloud_prev: ParticleCloud, xi_new: np.ndarray,
                 config: EngineConfig, need_cross: bool = True) -> KernelBatch:
    pot_eta1, pot_eta2, pot_raw, pot_acts = runner.potential_batch(xi_new)
    eta_prev = runner.kernel_marginal()
    k_eta1 = eta_prev.eta1[None, :] + pot_eta1
    k_eta2 = eta_prev.eta2[None, :, :] + pot_eta2
    log_kernel_cross = None
    log_pot_cross = None
    if need_cross:
        log_kernel_cross = gaussian.log_density_cross(k_eta1, k_eta2, cloud_prev.xi)
        if config.clip_enabled:
            log_pot_cross = potential_cross(pot_eta1, pot_eta2, cloud_prev.xi)
            log_pot_cross = np.clip(log_pot_cross, config.log_eps_minus,
                                    config.log_eps_plus)
    return KernelBatch(eta1=k_eta1, eta2=k_eta2, log_kernel_cross=log_kernel_cross,
                       log_pot_cross=log_pot_cross, pot_eta1=pot_eta1,
                       pot_eta2=pot_eta2, pot_raw=pot_raw, pot_acts=pot_acts)


def potential_cross(pot_eta1: np.ndarray, pot_eta2: np.ndarray,
                    xs_prev: np.ndarray) -> np.ndarray:
    """<eta~(xi_new_i), T(xs_prev_j)> for all pairs; shape (n_new, n_prev)."""
    lin = pot_eta1 @ xs_prev.T
    quad = np.einsum("jd,nde,je->nj", xs_prev, pot_eta2, xs_prev)
    return lin + quad


def compute_weights(cloud_prev: ParticleCloud, kernel: KernelBatch) -> WeightMatrix:
    """Self-normalized importance weights, one row per new particle.

    log_unnorm[i][j] = log q_{t-1|t}(xi_new_i, xi_prev_j) - log q_{t-1}(xi_prev_j);
    when clipping is enabled the clamped potential replaces the kernel
    ratio (they differ by a row constant when no clamp binds).
    """
    if kernel.log_pot_cross is not None:
        log_unnorm = kernel.log_pot_cross
    else:
        log_unnorm = kernel.log_kernel_cross - cloud_prev.log_q_marginal[None, :]
    row_max = np.max(log_unnorm, axis=1)
    if not np.all(np.isfinite(row_max)):
        bad = int(np.nonzero(~np.isfinite(row_max))[0][0])
        raise DegenerateRow(f"weight row {bad} has no finite mass")
    shifted = np.exp(log_unnorm - row_max[:, None])
    w = shifted / shifted.sum(axis=1, keepdims=True)
    return WeightMatrix(w=w, log_unnorm=log_unnorm)


def pair_terms(model, cloud_prev: ParticleCloud, xi_new: np.ndarray, y_t: np.ndarray,
               t: int, kernel: KernelBatch) -> np.ndarray:
    """h~_t(xi_prev_j, xi_new_i) for all pairs, reusing the kernel densities."""
    log_m = models.log_m_cross(model, cloud_prev.xi, xi_new, t)
    log_g = models.log_g_batch(model, xi_new, y_t)
    return log_m + log_g[:, None] - kernel.log_kernel_cross


# ---------------------------------------------------------------------------
# Statistic updates
# ---------------------------------------------------------------------------


def _check_finite(cloud: ParticleCloud) -> None:
    if not np.all(np.isfinite(cloud.h_stat)):
        bad = int(np.nonzero(~np.isfinite(cloud.h_stat))[0][0])
        raise NonFiniteStatistic(f"h statistic non-finite at particle {bad}, t={cloud.t}")
    for name, arr in (("g", cloud.g_stat), ("f", cloud.f_stat)):
        if arr is not None and not np.all(np.isfinite(arr)):
            bad = int(np.nonzero(~np.isfinite(arr).all(axis=1))[0][0])
            raise NonFiniteStatistic(
                f"{name} statistic non-finite at particle {bad}, t={cloud.t}")


def _kernel_scores(kernel: KernelBatch, xs_prev: np.ndarray):
    """Closed-form kernel score pieces: means and second moments per row."""
    mean, second = gaussian.mean_params_batch(kernel.eta1, kernel.eta2)
    return mean, second


def update_statistics(cloud_prev: ParticleCloud, wmat: WeightMatrix,
                      xi_new: np.ndarray, model, runner, y_t: np.ndarray, t: int,
                      kernel: KernelBatch, log_q_new: np.ndarray,
                      h_tilde: np.ndarray | None = None,
                      center_gstat: bool = False) -> ParticleCloud:
    """Full O(N^2) self-normalized update of all three statistics."""
    w = wmat.w
    if h_tilde is None:
        h_tilde = pair_terms(model, cloud_prev, xi_new, y_t, t, kernel)
    bracket = cloud_prev.h_stat[None, :] + h_tilde       # (N_new, N_prev)
    h_new = np.einsum("ij,ij->i", w, bracket)

    g_new = None
    if cloud_prev.g_stat is not None:
        coeff = bracket - h_new[:, None] if center_gstat else bracket
        mean, second = _kernel_scores(kernel, cloud_prev.xi)
        cw = w * coeff
        # contraction of the closed-form kernel scores with the weights
        u1 = cw @ cloud_prev.xi - cw.sum(axis=1)[:, None] * mean
        u2 = (np.einsum("ij,jd,je->ide", cw, cloud_prev.xi, cloud_prev.xi)
              - cw.sum(axis=1)[:, None, None] * second)
        g_new = w @ cloud_prev.g_stat
        g_new += runner.kernel_phi_contract(u1, u2, kernel.pot_raw, kernel.pot_acts)

    f_new = None
    if cloud_prev.f_stat is not None:
        f_new = w @ cloud_prev.f_stat
        f_new += models.grad_theta_pair_contract(model, cloud_prev.xi, xi_new,
                                                 y_t, t, w)

    cloud = ParticleCloud(xi=xi_new, h_stat=h_new, g_stat=g_new, f_stat=f_new,
                          log_q_marginal=log_q_new, eta=runner.current_eta(),
                          t=t, chain=getattr(runner, "chain_cur", None))
    _check_finite(cloud)
    return cloud


def _categorical_rows(w: np.ndarray, m_draws: int, rng: np.random.Generator) -> np.ndarray:
    n = w.shape[0]
    idx = np.empty((n, m_draws), dtype=np.int64)
    u = rng.random((n, m_draws))
    for i in range(n):
        cdf = np.cumsum(w[i])
        cdf[-1] = 1.0
        idx[i] = np.searchsorted(cdf, u[i], side="right")
    return np.minimum(idx, w.shape[1] - 1)


def _accept_reject_rows(cloud_prev: ParticleCloud, kernel: KernelBatch,
                        config: EngineConfig, m_draws: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Index draws via uniform proposals accepted against the potential bound."""
    if not config.clip_enabled:
        raise MissingBound("accept_reject requires clipping (or an explicit bound) "
                           "to upper-bound the potential")
    n_new = kernel.pot_eta1.shape[0]
    n_prev = cloud_prev.n
    idx = np.full((n_new, m_draws), -1, dtype=np.int64)
    pending = np.stack(np.nonzero(idx < 0), axis=1)  # (n_new*m, 2)
    budget = config.ar_proposal_cap_factor * n_prev
    rounds = 0
    while pending.shape[0] and rounds < budget:
        rows = pending[:, 0]
        prop = rng.integers(0, n_prev, size=pending.shape[0])
        xj = cloud_prev.xi[prop]
        log_pot = (np.einsum("kd,kd->k", kernel.pot_eta1[rows], xj)
                   + np.einsum("kd,kde,ke->k", xj, kernel.pot_eta2[rows], xj))
        log_pot = np.clip(log_pot, config.log_eps_minus, config.log_eps_plus)
        accept = np.log(rng.random(pending.shape[0])) < log_pot - config.log_eps_plus
        if np.any(accept):
            acc = pending[accept]
            idx[acc[:, 0], acc[:, 1]] = prop[accept]
            pending = pending[~accept]
        rounds += 1
    if pending.shape[0]:
        # explicit categorical fallback on the unresolved rows
        rows = np.unique(pending[:, 0])
        sub_kernel_cross = gaussian.log_density_cross(
            kernel.eta1[rows], kernel.eta2[rows], cloud_prev.xi)
        log_unnorm = sub_kernel_cross - cloud_prev.log_q_marginal[None, :]
        shifted = np.exp(log_unnorm - log_unnorm.max(axis=1, keepdims=True))
        w = shifted / shifted.sum(axis=1, keepdims=True)
        fallback = _categorical_rows(w, m_draws, rng)
        for pos, row in enumerate(rows):
            undrawn = idx[row] < 0
            idx[row, undrawn] = fallback[pos, undrawn]
    return idx


def backward_sample_update(cloud_prev: ParticleCloud, xi_new: np.ndarray, m_draws: int,
                           rng: np.random.Generator, model, runner, y_t: np.ndarray,
                           t: int, kernel: KernelBatch, log_q_new: np.ndarray,
                           config: EngineConfig, method: str = "categorical",
                           wmat: WeightMatrix | None = None) -> ParticleCloud:
    """O(N M) update: row sums replaced by averages over M index draws.

    The g-bracket is centered by the freshly computed h statistic (the
    built-in control variate); all three statistics share the draws.
    """
    n_new = xi_new.shape[0]
    if method == "categorical":
        if wmat is None:
            wmat = compute_weights(cloud_prev, kernel)
        idx = _categorical_rows(wmat.w, m_draws, rng)
    elif method == "accept_reject":
        idx = _accept_reject_rows(cloud_prev, kernel, config, m_draws, rng)
    else:
        raise ValueError(f"unknown backward sampling method {method!r}")

    xs_j = cloud_prev.xi[idx]                             # (N, M, d)
    means_prev = models.transition_mean(model, cloud_prev.xi)
    log_m = models.log_m_gathered(model, means_prev, idx, xi_new)
    log_g = models.log_g_batch(model, xi_new, y_t)
    # kernel log-density at gathered pairs
    log_z = gaussian.log_partition_batch(kernel.eta1, kernel.eta2)
    lin = np.einsum("nd,nmd->nm", kernel.eta1, xs_j)
    quad = np.einsum("nmd,nde,nme->nm", xs_j, kernel.eta2, xs_j)
    log_kernel = lin + quad - log_z[:, None]
    h_tilde = log_m + log_g[:, None] - log_kernel         # (N, M)

    bracket = cloud_prev.h_stat[idx] + h_tilde
    h_new = bracket.mean(axis=1)

    g_new = None
    if cloud_prev.g_stat is not None:
        coeff = bracket - h_new[:, None] if config.gstat_centered else bracket
        mean, second = gaussian.mean_params_batch(kernel.eta1, kernel.eta2)
        cw = coeff / m_draws
        u1 = (np.einsum("nm,nmd->nd", cw, xs_j)
              - cw.sum(axis=1)[:, None] * mean)
        u2 = (np.einsum("nm,nmd,nme->nde", cw, xs_j, xs_j)
              - cw.sum(axis=1)[:, None, None] * second)
        g_new = cloud_prev.g_stat[idx].mean(axis=1)
        g_new += runner.kernel_phi_contract(u1, u2, kernel.pot_raw, kernel.pot_acts)

    f_new = None
    if cloud_prev.f_stat is not None:
        f_new = cloud_prev.f_stat[idx].mean(axis=1)
        trans = models.grad_theta_transition_pairs(
            model, xs_j.reshape(n_new * m_draws, -1),
            np.repeat(xi_new, m_draws, axis=0))
        f_new += trans.reshape(n_new, m_draws, -1).mean(axis=1)
        f_new += models.grad_theta_emission_batch(model, xi_new, y_t)

    cloud = ParticleCloud(xi=xi_new, h_stat=h_new, g_stat=g_new, f_stat=f_new,
                          log_q_marginal=log_q_new, eta=runner.current_eta(),
                          t=t, chain=getattr(runner, "chain_cur", None))
    _check_finite(cloud)
    return cloud


# ---------------------------------------------------------------------------
# Estimators and the full step
# ---------------------------------------------------------------------------


def estimate(cloud: ParticleCloud, use_control_variates: bool = True) -> EstimatorOutput:
    """Per-step ELBO and gradient estimates from the current cloud.

    elbo averages h - log q over particles; the phi-gradient couples the
    marginal scores with the h statistics (optionally centered, which
    leaves the expectation unchanged by the score identity) and adds the
    carried g statistics; the theta-gradient averages the f statistics.
    """
    elbo = float(np.mean(cloud.h_stat - cloud.log_q_marginal))
    grad_phi = None
    grad_theta = None
    if cloud.g_stat is not None and cloud.chain is not None and cloud.chain.jac is not None:
        scores = gradients.marginal_scores_phi(cloud.chain, cloud.xi)
        coeff = cloud.h_stat - cloud.h_stat.mean() if use_control_variates else cloud.h_stat
        grad_phi = (scores * coeff[:, None] + cloud.g_stat).mean(axis=0)
    if cloud.f_stat is not None:
        grad_theta = cloud.f_stat.mean(axis=0)
    return EstimatorOutput(elbo=elbo, grad_phi=grad_phi, grad_theta=grad_theta)


@dataclass
class EngineState:
    cloud: ParticleCloud
    runner: object
    t: int = 0
    last_step_ns: int = 0
    last_wmat: WeightMatrix | None = field(default=None, repr=False)


def init_state(model, runner, y0: np.ndarray, config: EngineConfig,
               rng: np.random.Generator) -> EngineState:
    dim_theta = models.theta_layout(model).total if config.compute_grads else None
    cloud = init_cloud(model, runner, y0, config.n_particles, rng,
                       dim_theta=dim_theta)
    return EngineState(cloud=cloud, runner=runner, t=0)


def step(state: EngineState, y_t: np.ndarray, model, config: EngineConfig,
         rng: np.random.Generator, keep_weights: bool = False) -> tuple[EngineState, EstimatorOutput]:
    """Advance one observation: sample, weight, update, estimate."""
    started = time.perf_counter_ns()
    runner = state.runner
    runner.begin_step(y_t)
    eta_t = runner.current_eta()
    xi_new = gaussian.sample(eta_t, rng, config.n_particles)
    log_q_new = gaussian.log_density_cross(eta_t.eta1[None], eta_t.eta2[None], xi_new)[0]
    t_new = state.t + 1
    need_cross = config.method != "accept_reject" or keep_weights
    kernel = build_kernel(runner, state.cloud, xi_new, config, need_cross=need_cross)
    wmat = None
    if config.method == "full":
        wmat = compute_weights(state.cloud, kernel)
        cloud_new = update_statistics(state.cloud, wmat, xi_new, model, runner,
                                      y_t, t_new, kernel, log_q_new,
                                      center_gstat=config.gstat_centered)
    else:
        if keep_weights:
            wmat = compute_weights(state.cloud, kernel)
        cloud_new = backward_sample_update(state.cloud, xi_new, config.m_backward,
                                           rng, model, runner, y_t, t_new, kernel,
                                           log_q_new, config, method=config.method,
                                           wmat=wmat)
    out = estimate(cloud_new, use_control_variates=config.cv_grad_phi)
    new_state = EngineState(cloud=cloud_new, runner=runner, t=t_new,
                            last_step_ns=time.perf_counter_ns() - started,
                            last_wmat=wmat if keep_weights else None)
    return new_state, out
