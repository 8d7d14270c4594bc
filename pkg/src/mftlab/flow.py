"""Gradient-flow training of the discrete ensemble with an energy guard.

The update is explicit Euler with simultaneous semantics: all particle
gradients are computed against the frozen ensemble, then every particle
moves.  A step that raises the objective by more than the guard tolerance is
retried at half the step size (the flow dissipates energy in the continuum,
so a genuine increase means the step was too coarse); the reduced step is
kept for the rest of the run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import sampling
from .model import ParamEnsemble, gradient_and_risk, penalty


class FlowDivergenceError(RuntimeError):
    """The energy guard kept rejecting steps; the flow cannot proceed."""


LOG_HEADER = ["tau", "objective", "risk", "mean_sq_norm", "max_norm", "grad_norm"]


@dataclass
class FlowLog:
    """Per-accepted-step scalars, one row per logged state (τ=0 included)."""

    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    halvings: int = 0

    def append(self, tau, objective, risk_value, mean_sq, max_norm, grad_norm):
        self.rows.append((tau, objective, risk_value, mean_sq, max_norm, grad_norm))

    def column(self, name: str) -> np.ndarray:
        return np.array([row[LOG_HEADER.index(name)] for row in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
            writer.writerows([f"{v:.17g}" for v in row] for row in self.rows)


@dataclass
class FlowConfig:
    """Settings for one gradient-flow run."""

    lam: float
    dtau: float
    tau_end: float
    dataset: object
    seed: int = 0
    radius: float = 1.0
    guard_tol: float = 1e-10
    snapshot_every: int | None = None
    max_halvings: int = 60

    def __post_init__(self):
        if self.lam < 0.0 or self.dtau <= 0.0:
            raise ValueError("need lam >= 0 and dtau > 0")
        if self.dtau > self.tau_end > 0.0:
            raise ValueError("dtau must not exceed tau_end")
        if self.radius <= 0.0:
            raise ValueError("init radius must be positive")


def init_ensemble(L: int, M: int, radius: float, seed: int, D: int, hidden: int) -> ParamEnsemble:
    """L x M particles i.i.d. uniform on the radius-``radius`` ball."""
    rng = np.random.default_rng(seed)
    dim = 2 * D * D + 2 * hidden * D
    flat = sampling.uniform_ball(rng, L * M, dim, radius).reshape(L, M, dim)
    return ParamEnsemble.from_flat(flat, D, hidden)


def coupled_flat(L: int, M: int, D: int, hidden: int, radius: float, seed: int,
                 master_depth: int) -> np.ndarray:
    """Particle grid whose (layer, head) draws are keyed to a master depth
    grid, so ensembles of different sizes share draws where their depth slots
    align.  Returns an (L, M, beta_dim) array."""
    if master_depth % L != 0:
        raise ValueError("master depth grid must refine L")
    stride = master_depth // L
    dim = 2 * D * D + 2 * hidden * D
    flat = np.empty((L, M, dim))
    for layer in range(L):
        for head in range(M):
            flat[layer, head] = sampling.coupled_ball_draw(seed, layer * stride, head, dim, radius)
    return flat


def moment_stats(ens: ParamEnsemble):
    """(mean squared particle norm, max particle norm)."""
    sq = ens.beta_sq_norms()
    return float(sq.mean()), float(np.sqrt(sq.max()))


def moment_bound_a0(radius: float, lam: float, data_bound: float, growth_k: float) -> float:
    """Second-moment ceiling A0^2 = R^2 + (2 B^2 + 2 B^2 exp(K(1+R+R^2))^2)/lam
    valid along the flow from a radius-R initialization."""
    if lam <= 0.0:
        return np.inf
    grown = data_bound * np.exp(growth_k * (1.0 + radius + radius**2))
    return float(radius**2 + (2.0 * data_bound**2 + 2.0 * grown**2) / lam)


def run_flow(theta0: ParamEnsemble, cfg: FlowConfig):
    """Integrate the parameter flow; returns (final ensemble, FlowLog)."""
    ds = cfg.dataset
    theta = theta0.copy()
    log = FlowLog()
    grad, r = gradient_and_risk(ds, theta, cfg.lam)
    grad.check_finite(0.0)
    q = r + penalty(theta, cfg.lam)
    mean_sq, max_norm = moment_stats(theta)
    log.append(0.0, q, r, mean_sq, max_norm, grad.rms_norm())
    if cfg.snapshot_every:
        log.snapshots.append((0.0, theta.flat()))

    tau = 0.0
    dtau = cfg.dtau
    accepted = 0
    # margin well above float accumulation so tau_end = n * dtau gives
    # exactly n accepted steps
    while tau < cfg.tau_end - 1e-9 * max(1.0, cfg.tau_end):
        candidate = theta.stepped(-dtau, grad)
        cand_grad, rc = gradient_and_risk(ds, candidate, cfg.lam)
        qc = rc + penalty(candidate, cfg.lam)
        if qc > q + cfg.guard_tol:
            if log.halvings >= cfg.max_halvings:
                raise FlowDivergenceError(
                    f"energy guard rejected {log.halvings} halvings at tau={tau:.6g}"
                )
            dtau *= 0.5
            log.halvings += 1
            continue
        tau += dtau
        accepted += 1
        theta = candidate
        q, r = qc, rc
        grad = cand_grad
        grad.check_finite(tau)
        mean_sq, max_norm = moment_stats(theta)
        log.append(tau, q, r, mean_sq, max_norm, grad.rms_norm())
        if cfg.snapshot_every and accepted % cfg.snapshot_every == 0:
            log.snapshots.append((tau, theta.flat()))
    return theta, log
