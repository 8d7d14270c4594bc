"""Mean-field objects in particle (Lagrangian) form.

A :class:`SlicedDistribution` approximates a depth-indexed parameter law
rho(beta, t): S depth knots, each holding P particles with uniform weight
1/P, piecewise constant in t across knot s = [s/S, (s+1)/S).  The continuous
network state solves

    dT/dt = mean over the active knot's particles of g(T, beta),
    g = (f + h) / 2,

integrated by classical RK4 on a grid whose step count is a multiple of S so
knot boundaries coincide with grid points.  The adjoint solves the backward
linear ODE  d vec[p]/dt = -(mean Jacobian)^T-contracted  with terminal value
residual times the read-out seed; it is integrated by RK4 backward jointly
with the state, resetting the state to the stored trace at every grid point.

The particle gradient flow moves every particle of the evolving law by

    d beta / d tau = -G(beta, rho, tau),
    G = mean_H grad_beta Tr(g(T(t), beta)^T p(t)) + lam beta,

with all drifts computed from the frozen ensemble before any particle moves
(simultaneous update), and the same energy guard as the discrete flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from . import sampling
from .flow import FlowDivergenceError, FlowLog
from .linalg import vectorize
from .model import (GradientBundle, NonFiniteStateError, ParamEnsemble,
                    load_ensemble, save_ensemble)
from .transport import w1_exact


class SlicedDistribution(ParamEnsemble):
    """Particle representation of rho(beta, t): an S x P grid reusing the
    ensemble storage layout (knots in place of layers)."""

    @property
    def S(self) -> int:
        return self.L

    @property
    def P(self) -> int:
        return self.M

    def mean_drift(self, X: np.ndarray, knot: int) -> np.ndarray:
        """Knot-averaged encoder field (f + h)/2 on a (B, D, N+1) batch."""
        att = enc.attn_heads_mean(X, self.V[knot], self.W[knot])
        mlp = enc.mlp_heads_mean(X, self.W1[knot], self.W2[knot])
        return 0.5 * (att + mlp)

    def mean_vjp(self, X: np.ndarray, U: np.ndarray, knot: int) -> np.ndarray:
        """Gradient of <U, mean drift(X)> with respect to X."""
        att = enc.attn_state_grad_mean(X, self.V[knot], self.W[knot], U)
        mlp = enc.mlp_state_grad_mean(X, self.W1[knot], self.W2[knot], U)
        return 0.5 * (att + mlp)

    def drift_and_vjp(self, X: np.ndarray, U: np.ndarray, knot: int):
        """(mean drift, VJP) sharing one evaluation of the nonlinearities."""
        fa, ac = enc.attn_layer_forward(X, self.V[knot], self.W[knot])
        fm, mc = enc.mlp_layer_forward(X, self.W1[knot], self.W2[knot])
        sga, _, _ = enc.attn_layer_backward(X, self.V[knot], self.W[knot], ac, U, False)
        sgm, _, _ = enc.mlp_layer_backward(X, self.W1[knot], self.W2[knot], mc, U, False)
        return 0.5 * (fa + fm), 0.5 * (sga + sgm)


def sample_rho0(S: int, P: int, radius: float, seed: int, D: int, hidden: int) -> SlicedDistribution:
    """S knots of P particles i.i.d. uniform on the radius-``radius`` ball."""
    if radius < 0.0:
        raise ValueError("radius must be nonnegative")
    rng = np.random.default_rng(seed)
    dim = enc.beta_dim(D, hidden)
    flat = sampling.uniform_ball(rng, S * P, dim, radius).reshape(S, P, dim)
    return SlicedDistribution.from_flat(flat, D, hidden)


@dataclass(frozen=True)
class DiracMixture:
    """(1 - eta) * base + eta * point mass at one particle (same at every t);
    the drift provider used by the functional-derivative secant checks."""

    base: SlicedDistribution
    particle: enc.ParticleParam
    eta: float

    @property
    def S(self) -> int:
        return self.base.S

    def mean_drift(self, X: np.ndarray, knot: int) -> np.ndarray:
        att = enc.attn_heads_mean(X, self.particle.attn.V[None], self.particle.attn.W[None])
        mlp = enc.mlp_heads_mean(X, self.particle.mlp.W1[None], self.particle.mlp.W2[None])
        point = 0.5 * (att + mlp)
        return (1.0 - self.eta) * self.base.mean_drift(X, knot) + self.eta * point

    def mean_sq_norm(self) -> float:
        return (1.0 - self.eta) * self.base.mean_sq_norm() + self.eta * self.particle.norm_sq


def save_distribution(rho: SlicedDistribution, path, radius: float | None = None,
                      seed: int | None = None):
    """Serialize like a parameter ensemble; the sidecar records the knot
    structure and sampling provenance."""
    meta = {"knots": rho.S, "particles_per_knot": rho.P}
    if radius is not None:
        meta["radius"] = radius
    if seed is not None:
        meta["seed"] = seed
    save_ensemble(rho, path, meta=meta)


def load_distribution(path) -> SlicedDistribution:
    ens = load_ensemble(path)
    return SlicedDistribution(ens.V, ens.W, ens.W1, ens.W2)


def knot_continuity_estimate(rho: SlicedDistribution) -> np.ndarray:
    """Empirical depth-continuity diagnostic: Wasserstein-1 distance between
    consecutive knot clouds divided by the knot width 1/S.  An upper bound on
    the bounded-Lipschitz rate of the underlying law; diagnostic only."""
    flat = rho.flat()
    return np.array(
        [rho.S * w1_exact(flat[s], flat[s + 1]) for s in range(rho.S - 1)]
    )


@dataclass
class ContinuousTrace:
    """Dense RK4 output on [0, 1]: steps+1 states at uniform grid times."""

    states: list
    times: np.ndarray


def _check_grid(provider, steps: int) -> int:
    S = provider.S
    if steps % S != 0 or steps < S:
        raise ValueError(f"steps={steps} must be a positive multiple of S={S}")
    return steps // S


def _continuous_states(Hs: np.ndarray, provider, steps: int) -> list:
    """Batched RK4 sweep of the knot-averaged field; returns steps+1 states."""
    per_knot = _check_grid(provider, steps)
    h = 1.0 / steps
    X = np.asarray(Hs, dtype=np.float64)
    states = [X]
    for k in range(steps):
        knot = k // per_knot
        k1 = provider.mean_drift(X, knot)
        k2 = provider.mean_drift(X + 0.5 * h * k1, knot)
        k3 = provider.mean_drift(X + 0.5 * h * k2, knot)
        k4 = provider.mean_drift(X + h * k3, knot)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(X).all():
            raise NonFiniteStateError(f"non-finite continuous state at grid step {k}", layer=knot)
        states.append(X)
    return states


def continuous_forward(H: np.ndarray, rho, steps: int | None = None) -> ContinuousTrace:
    """Integrate one sequence through the mean-field network; the default
    grid uses 16 RK4 steps per knot."""
    if steps is None:
        steps = 16 * rho.S
    states = _continuous_states(np.asarray(H, dtype=np.float64)[None], rho, steps)
    return ContinuousTrace(states=[s[0] for s in states], times=np.arange(steps + 1) / steps)


def _continuous_adjoints(states: list, residuals: np.ndarray, rho, steps: int,
                         read_row: int) -> list:
    """Backward RK4 for the adjoint, re-deriving the state within each step
    from the stored trace endpoint."""
    per_knot = _check_grid(rho, steps)
    h = 1.0 / steps
    nb, D, n = states[0].shape
    p = np.zeros((nb, D, n))
    p[:, read_row, -1] = residuals
    adjoints = [p]
    for k in reversed(range(steps)):
        knot = k // per_knot
        X0 = states[k + 1]
        # joint backward RK4 on (state, adjoint): the state runs with the
        # negated drift, the adjoint with the positive VJP
        d1, k1p = rho.drift_and_vjp(X0, p, knot)
        X1 = X0 - 0.5 * h * d1
        d2, k2p = rho.drift_and_vjp(X1, p + 0.5 * h * k1p, knot)
        X2 = X0 - 0.5 * h * d2
        d3, k3p = rho.drift_and_vjp(X2, p + 0.5 * h * k2p, knot)
        X3 = X0 - h * d3
        _, k4p = rho.drift_and_vjp(X3, p + h * k3p, knot)
        p = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not np.isfinite(p).all():
            raise NonFiniteStateError(f"non-finite adjoint at grid step {k}", layer=knot)
        adjoints.append(p)
    adjoints.reverse()
    return adjoints


def continuous_backward(H, y: float, trace: ContinuousTrace, rho, read_row: int):
    """Adjoint states p(t) of the squared-error loss on the trace grid."""
    states = [s[None] for s in trace.states]
    residual = float(trace.states[-1][read_row, -1]) - y
    steps = len(trace.states) - 1
    adjoints = _continuous_adjoints(states, np.array([residual]), rho, steps, read_row)
    return [p[0] for p in adjoints]


@dataclass
class TraceCache:
    """Forward and adjoint states for every sample of a dataset under one
    distribution; the precomputation behind functional gradients and drifts."""

    rho: object
    forward: list
    adjoints: list
    residuals: np.ndarray
    steps: int
    read_row: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.steps

    def grid_index(self, t: float) -> int:
        idx = int(round(t * self.steps))
        if not 0 <= idx <= self.steps:
            raise ValueError(f"time {t} outside [0, 1]")
        return idx


def compute_traces(dataset, rho, steps: int) -> TraceCache:
    Hs, ys = dataset.stacked()
    states = _continuous_states(Hs, rho, steps)
    residuals = states[-1][:, dataset.read_row, -1] - ys
    adjoints = _continuous_adjoints(states, residuals, rho, steps, dataset.read_row)
    return TraceCache(
        rho=rho, forward=states, adjoints=adjoints, residuals=residuals,
        steps=steps, read_row=dataset.read_row,
    )


def _particle_stacks(p: enc.ParticleParam):
    return p.attn.V[None], p.attn.W[None], p.mlp.W1[None], p.mlp.W2[None]


def functional_gradient(cache: TraceCache, lam: float, particle: enc.ParticleParam,
                        t: float) -> float:
    """First-variation value at (beta, t): mean_H Tr(g(T(t), beta)^T p(t))
    plus the quadratic penalty lam/2 |beta|^2."""
    idx = cache.grid_index(t)
    Z = cache.forward[idx]
    U = cache.adjoints[idx]
    Vs, Ws, W1s, W2s = _particle_stacks(particle)
    g = 0.5 * (enc.attn_heads_mean(Z, Vs, Ws) + enc.mlp_heads_mean(Z, W1s, W2s))
    return float(np.mean(np.sum(g * U, axis=(1, 2))) + 0.5 * lam * particle.norm_sq)


def functional_gradient_time_avg(cache: TraceCache, lam: float,
                                 particle: enc.ParticleParam) -> float:
    """Trapezoidal time average of the first variation over the whole grid."""
    values = [
        functional_gradient(cache, 0.0, particle, t) for t in cache.times
    ]
    return float(np.trapezoid(values, cache.times) + 0.5 * lam * particle.norm_sq)


def particle_drift(cache: TraceCache, lam: float, particle: enc.ParticleParam,
                   t: float) -> np.ndarray:
    """Gradient of the first variation in beta: the particle's flow drift."""
    idx = cache.grid_index(t)
    Z = cache.forward[idx]
    U = cache.adjoints[idx]
    Vs, Ws, W1s, W2s = _particle_stacks(particle)
    gv, gw = enc.attn_grad_param_heads(Z, Vs, Ws, U)
    g1, g2 = enc.mlp_grad_param_heads(Z, W1s, W2s, U)
    theta = particle.attn.theta
    w = particle.mlp.w
    grad_theta = 0.5 * np.concatenate([vectorize(gv[0]), vectorize(gw[0])]) + lam * theta
    grad_w = 0.5 * np.concatenate([vectorize(g1[0]), vectorize(g2[0])]) + lam * w
    return np.concatenate([grad_theta, grad_w])


def mf_risk(dataset, rho, steps: int) -> float:
    Hs, ys = dataset.stacked()
    states = _continuous_states(Hs, rho, steps)
    preds = states[-1][:, dataset.read_row, -1]
    return float(np.mean(0.5 * (preds - ys) ** 2))


def mf_objective(dataset, rho, lam: float, steps: int) -> float:
    """Energy of the particle law: risk plus lam/2 times the second moment."""
    return mf_risk(dataset, rho, steps) + 0.5 * lam * rho.mean_sq_norm()


@dataclass
class MeanFieldFlowResult:
    rho: SlicedDistribution
    log: FlowLog
    snapshots: list


def _knot_drifts(cache: TraceCache, rho: SlicedDistribution, lam: float, per_knot: int):
    """Simultaneous drifts for every particle, evaluated at each knot's
    midpoint grid time."""
    dV = np.empty_like(rho.V)
    dW = np.empty_like(rho.W)
    dW1 = np.empty_like(rho.W1)
    dW2 = np.empty_like(rho.W2)
    for s in range(rho.S):
        idx = s * per_knot + per_knot // 2
        Z = cache.forward[idx]
        U = cache.adjoints[idx]
        gv, gw = enc.attn_grad_param_heads(Z, rho.V[s], rho.W[s], U)
        g1, g2 = enc.mlp_grad_param_heads(Z, rho.W1[s], rho.W2[s], U)
        dV[s] = 0.5 * gv + lam * rho.V[s]
        dW[s] = 0.5 * gw + lam * rho.W[s]
        dW1[s] = 0.5 * g1 + lam * rho.W1[s]
        dW2[s] = 0.5 * g2 + lam * rho.W2[s]
    return GradientBundle(dV, dW, dW1, dW2)


def meanfield_flow(dataset, rho0: SlicedDistribution, lam: float, tau_end: float,
                   dtau: float, steps_per_knot: int = 16, guard_tol: float = 1e-10,
                   record_every: int | None = None, max_halvings: int = 60) -> MeanFieldFlowResult:
    """Euler integration of the interacting particle system (all drifts from
    the frozen empirical law, then all particles move)."""
    if dtau <= 0.0:
        raise ValueError("dtau must be positive")
    rho = SlicedDistribution(rho0.V.copy(), rho0.W.copy(), rho0.W1.copy(), rho0.W2.copy())
    steps = steps_per_knot * rho.S
    log = FlowLog()
    snapshots = []

    cache = compute_traces(dataset, rho, steps)
    grad = _knot_drifts(cache, rho, lam, steps_per_knot)
    grad.check_finite(0.0)
    r = float(np.mean(0.5 * cache.residuals**2))
    q = r + 0.5 * lam * rho.mean_sq_norm()
    sq = rho.beta_sq_norms()
    log.append(0.0, q, r, float(sq.mean()), float(np.sqrt(sq.max())), grad.rms_norm())
    if record_every:
        snapshots.append((0.0, rho.flat()))

    tau = 0.0
    step_size = dtau
    accepted = 0
    while tau < tau_end - 1e-9 * max(1.0, tau_end):
        cand = rho.stepped(-step_size, grad)
        cand_cache = compute_traces(dataset, cand, steps)
        rc = float(np.mean(0.5 * cand_cache.residuals**2))
        qc = rc + 0.5 * lam * cand.mean_sq_norm()
        if qc > q + guard_tol:
            if log.halvings >= max_halvings:
                raise FlowDivergenceError(
                    f"energy guard rejected {log.halvings} halvings at tau={tau:.6g}"
                )
            step_size *= 0.5
            log.halvings += 1
            continue
        tau += step_size
        accepted += 1
        rho = cand
        q, r = qc, rc
        cache = cand_cache
        grad = _knot_drifts(cache, rho, lam, steps_per_knot)
        grad.check_finite(tau)
        sq = rho.beta_sq_norms()
        log.append(tau, q, r, float(sq.mean()), float(np.sqrt(sq.max())), grad.rms_norm())
        if record_every and accepted % record_every == 0:
            snapshots.append((tau, rho.flat()))
    return MeanFieldFlowResult(rho=rho, log=log, snapshots=snapshots)
