"""The discrete depth-L, width-M residual network and its exact gradient.

One block at depth index ``l`` (time ``t = l/L``) applies two residual
half-steps of size ``dt/2 = 1/(2L)``: first the head-averaged attention
encoder, then the head-averaged MLP encoder on the post-attention state:

    T(t + dt/2) = T(t)        + (dt/2) mean_j f(T(t),        theta_{l,j})
    T(t + dt)   = T(t + dt/2) + (dt/2) mean_j h(T(t + dt/2), w_{l,j})

The scalar prediction is one matrix entry of the final state (``readout``).
The regularized objective is

    Qhat = Rhat + lam / (2 M L) * sum_{l,j} |beta_{l,j}|^2,

and the per-particle gradient returned by :func:`param_gradient` is the
``M L``-rescaled steepest-descent direction

    G_f(theta_{l,j}) = 1/2 mean_H grad_theta Tr(f(T(t))^T p(t + dt/2)) + lam theta
    G_h(w_{l,j})     = 1/2 mean_H grad_w     Tr(h(T(t+dt/2))^T p(t + dt)) + lam w

where ``p`` is the adjoint state computed by :func:`backward` as a reverse
vector-Jacobian sweep (never materializing the layer Jacobians).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoders as enc


class NonFiniteStateError(RuntimeError):
    """A state or gradient stopped being finite; carries the depth index."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass
class ParamEnsemble:
    """All parameters of the discrete network: an L x M grid of particles.

    Stored as stacked matrices so whole layers can be evaluated in one einsum
    pass: V, W are (L, M, D, D); W1 is (L, M, m, D); W2 is (L, M, D, m).
    dt = 1/L is derived, never stored.
    """

    V: np.ndarray
    W: np.ndarray
    W1: np.ndarray
    W2: np.ndarray

    @property
    def L(self) -> int:
        return self.V.shape[0]

    @property
    def M(self) -> int:
        return self.V.shape[1]

    @property
    def D(self) -> int:
        return self.V.shape[2]

    @property
    def hidden(self) -> int:
        return self.W1.shape[2]

    @property
    def dt(self) -> float:
        return 1.0 / self.L

    @property
    def beta_dim(self) -> int:
        return enc.beta_dim(self.D, self.hidden)

    @classmethod
    def zeros(cls, L: int, M: int, D: int, hidden: int) -> "ParamEnsemble":
        return cls(
            np.zeros((L, M, D, D)),
            np.zeros((L, M, D, D)),
            np.zeros((L, M, hidden, D)),
            np.zeros((L, M, D, hidden)),
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, D: int, hidden: int) -> "ParamEnsemble":
        """Inverse of :meth:`flat`; ``flat`` has shape (L, M, beta_dim)."""
        L, M, dim = flat.shape
        if dim != enc.beta_dim(D, hidden):
            raise ValueError("flat particle length does not match (D, hidden)")
        d2 = D * D
        md = hidden * D
        cuts = np.cumsum([d2, d2, md])
        v, w, w1, w2 = np.split(flat, cuts, axis=2)
        # column-stacked vectors: unflatten as (cols, rows) then swap axes
        return cls(
            v.reshape(L, M, D, D).swapaxes(2, 3).copy(),
            w.reshape(L, M, D, D).swapaxes(2, 3).copy(),
            w1.reshape(L, M, D, hidden).swapaxes(2, 3).copy(),
            w2.reshape(L, M, hidden, D).swapaxes(2, 3).copy(),
        )

    def particle(self, layer: int, head: int) -> enc.ParticleParam:
        return enc.ParticleParam(
            enc.AttnParam(self.V[layer, head].copy(), self.W[layer, head].copy()),
            enc.MlpParam(self.W1[layer, head].copy(), self.W2[layer, head].copy()),
        )

    def flat(self) -> np.ndarray:
        """(L, M, beta_dim) array of column-stacked particle vectors
        theta ++ w = vec[V] ++ vec[W] ++ vec[W1] ++ vec[W2]."""
        L, M = self.L, self.M
        return np.concatenate(
            [
                self.V.swapaxes(2, 3).reshape(L, M, -1),
                self.W.swapaxes(2, 3).reshape(L, M, -1),
                self.W1.swapaxes(2, 3).reshape(L, M, -1),
                self.W2.swapaxes(2, 3).reshape(L, M, -1),
            ],
            axis=2,
        )

    def beta_sq_norms(self) -> np.ndarray:
        """Per-particle squared norms |theta|^2 + |w|^2, shape (L, M)."""
        return (
            np.sum(self.V**2, axis=(2, 3))
            + np.sum(self.W**2, axis=(2, 3))
            + np.sum(self.W1**2, axis=(2, 3))
            + np.sum(self.W2**2, axis=(2, 3))
        )

    def mean_sq_norm(self) -> float:
        return float(self.beta_sq_norms().mean())

    def max_norm(self) -> float:
        return float(np.sqrt(self.beta_sq_norms().max()))

    def copy(self) -> "ParamEnsemble":
        return type(self)(self.V.copy(), self.W.copy(), self.W1.copy(), self.W2.copy())

    def stepped(self, scale: float, g: "GradientBundle") -> "ParamEnsemble":
        """New ensemble (same type) with every particle moved by
        ``scale * gradient``."""
        return type(self)(
            self.V + scale * g.dV,
            self.W + scale * g.dW,
            self.W1 + scale * g.dW1,
            self.W2 + scale * g.dW2,
        )


@dataclass
class GradientBundle:
    """Per-particle gradient vectors in the same layout as the ensemble."""

    dV: np.ndarray
    dW: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray

    def sq_norms(self) -> np.ndarray:
        return (
            np.sum(self.dV**2, axis=(2, 3))
            + np.sum(self.dW**2, axis=(2, 3))
            + np.sum(self.dW1**2, axis=(2, 3))
            + np.sum(self.dW2**2, axis=(2, 3))
        )

    def rms_norm(self) -> float:
        """sqrt of the ensemble-averaged squared gradient norm."""
        return float(np.sqrt(self.sq_norms().mean()))

    def check_finite(self, tau: float | None = None):
        for name, arr in (("dV", self.dV), ("dW", self.dW), ("dW1", self.dW1), ("dW2", self.dW2)):
            bad = ~np.isfinite(arr)
            if bad.any():
                layer, head = np.argwhere(bad)[0][:2]
                at = f" at tau={tau}" if tau is not None else ""
                raise NonFiniteStateError(
                    f"non-finite gradient in {name} for particle (layer={layer}, head={head}){at}",
                    layer=int(layer),
                )


@dataclass
class ForwardTrace:
    """All 2L+1 states of one forward pass, t = 0, dt/2, dt, ..., 1."""

    states: list
    times: np.ndarray


@dataclass
class AdjointTrace:
    """Adjoint matrices at the same 2L+1 depth indices as the forward trace."""

    adjoints: list
    times: np.ndarray


def _forward_pass(Hs: np.ndarray, ens: ParamEnsemble):
    """Batched forward sweep; returns (2L+1 states, per-layer kernel caches)."""
    Hs = np.asarray(Hs, dtype=np.float64)
    if Hs.ndim != 3 or Hs.shape[1] != ens.D:
        raise ValueError(f"input batch shape {Hs.shape} incompatible with D={ens.D}")
    half = 0.5 * ens.dt
    states = [Hs]
    caches = []
    X = Hs
    for layer in range(ens.L):
        out, ac = enc.attn_layer_forward(X, ens.V[layer], ens.W[layer])
        X = X + half * out
        if not np.isfinite(X).all():
            raise NonFiniteStateError(f"non-finite state after attention half-step {layer}", layer)
        states.append(X)
        out, mc = enc.mlp_layer_forward(X, ens.W1[layer], ens.W2[layer])
        X = X + half * out
        if not np.isfinite(X).all():
            raise NonFiniteStateError(f"non-finite state after MLP half-step {layer}", layer)
        states.append(X)
        caches.append((ac, mc))
    return states, caches


def _forward_states(Hs: np.ndarray, ens: ParamEnsemble) -> list:
    """Batched forward pass; returns the list of 2L+1 (B, D, N+1) states."""
    return _forward_pass(Hs, ens)[0]


def _half_times(L: int) -> np.ndarray:
    return np.arange(2 * L + 1) / (2.0 * L)


def forward(H: np.ndarray, ens: ParamEnsemble) -> ForwardTrace:
    """Run the network on one sequence, keeping every half-step state."""
    states = _forward_states(np.asarray(H, dtype=np.float64)[None], ens)
    return ForwardTrace(states=[s[0] for s in states], times=_half_times(ens.L))


def readout(T: np.ndarray, row: int) -> float:
    """Extract the scalar prediction: entry (row, last column), 0-based."""
    T = np.asarray(T)
    if not 0 <= row < T.shape[0]:
        raise IndexError(f"read-out row {row} outside 0..{T.shape[0] - 1}")
    return float(T[row, -1])


def _read_row_or_default(ens: ParamEnsemble, read_row: int | None) -> int:
    return ens.D - 1 if read_row is None else read_row


def _backward_sweep(states: list, caches: list, residuals: np.ndarray, ens: ParamEnsemble,
                    read_row: int, lam: float | None):
    """Reverse vector-Jacobian sweep reusing the forward caches.

    Returns (2L+1 adjoints, GradientBundle or None); parameter gradients are
    accumulated when ``lam`` is given (they share the per-layer cotangent
    contractions with the adjoint update).
    """
    half = 0.5 * ens.dt
    nb, D, n = states[0].shape
    with_param = lam is not None
    bundle = None
    if with_param:
        bundle = GradientBundle(np.empty_like(ens.V), np.empty_like(ens.W),
                                np.empty_like(ens.W1), np.empty_like(ens.W2))
    p = np.zeros((nb, D, n))
    p[:, read_row, -1] = residuals
    adjoints = [p]
    for layer in reversed(range(ens.L)):
        ac, mc = caches[layer]
        sg, g1, g2 = enc.mlp_layer_backward(
            states[2 * layer + 1], ens.W1[layer], ens.W2[layer], mc, p, with_param
        )
        if with_param:
            bundle.dW1[layer] = 0.5 * g1 + lam * ens.W1[layer]
            bundle.dW2[layer] = 0.5 * g2 + lam * ens.W2[layer]
        p = p + half * sg
        adjoints.append(p)
        sg, gv, gw = enc.attn_layer_backward(
            states[2 * layer], ens.V[layer], ens.W[layer], ac, p, with_param
        )
        if with_param:
            bundle.dV[layer] = 0.5 * gv + lam * ens.V[layer]
            bundle.dW[layer] = 0.5 * gw + lam * ens.W[layer]
        p = p + half * sg
        adjoints.append(p)
    adjoints.reverse()
    return adjoints, bundle


def backward(H, y: float, trace: ForwardTrace, ens: ParamEnsemble,
             read_row: int | None = None) -> AdjointTrace:
    """Adjoint states of the squared-error loss for one sample.

    The seed at depth 1 is the residual times the single-entry read-out
    matrix; earlier adjoints multiply in the transposed per-layer factors
    ``I + (dt/2) mean_j J_encoder`` one at a time.
    """
    row = _read_row_or_default(ens, read_row)
    states, caches = _forward_pass(trace.states[0][None], ens)
    residual = readout(trace.states[-1], row) - y
    adjoints, _ = _backward_sweep(states, caches, np.array([residual]), ens, row, None)
    return AdjointTrace(adjoints=[p[0] for p in adjoints], times=_half_times(ens.L))


def risk(dataset, ens: ParamEnsemble) -> float:
    """Mean over the dataset of half the squared read-out residual."""
    if len(dataset) == 0:
        raise ValueError("risk of an empty dataset")
    Hs, ys = dataset.stacked()
    states = _forward_states(Hs, ens)
    preds = states[-1][:, dataset.read_row, -1]
    return float(np.mean(0.5 * (preds - ys) ** 2))


def penalty(ens: ParamEnsemble, lam: float) -> float:
    """The weight-decay term lam/(2 M L) sum |beta|^2."""
    return float(lam / (2.0 * ens.M * ens.L) * ens.beta_sq_norms().sum())


def objective(dataset, ens: ParamEnsemble, lam: float) -> float:
    """Regularized objective Qhat = Rhat + penalty."""
    if lam < 0.0:
        raise ValueError("lam must be nonnegative")
    return risk(dataset, ens) + penalty(ens, lam)


def param_gradient(dataset, ens: ParamEnsemble, lam: float) -> GradientBundle:
    """Per-particle gradients of the ML-rescaled flow (see module docstring).

    The dataset mean runs in fixed sample order, so repeated calls are
    bitwise identical.
    """
    return gradient_and_risk(dataset, ens, lam)[0]


def gradient_and_risk(dataset, ens: ParamEnsemble, lam: float):
    """(gradient bundle, risk) from a single forward/backward sweep."""
    if len(dataset) == 0:
        raise ValueError("gradient of an empty dataset")
    Hs, ys = dataset.stacked()
    states, caches = _forward_pass(Hs, ens)
    residuals = states[-1][:, dataset.read_row, -1] - ys
    _, bundle = _backward_sweep(states, caches, residuals, ens, dataset.read_row, lam)
    return bundle, float(np.mean(0.5 * residuals**2))


def output_bound(col2_H: float, growth_k: float, mean_sq_norm: float) -> float:
    """Growth envelope for traced states: col2(H) exp(K (1 + A + A^2)) with
    A the root mean squared particle norm."""
    a = np.sqrt(mean_sq_norm)
    return float(col2_H * np.exp(growth_k * (1.0 + a + a * a)))


# ---------------------------------------------------------------------------
# serialization: flat little-endian binary + JSON sidecar
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4I")


def save_ensemble(ens: ParamEnsemble, path, meta: dict | None = None):
    """Write header (L, M, D, m as little-endian u32) followed by particles
    in (layer, head) row-major order, each as theta ++ w float64 little-endian.
    A JSON sidecar at ``<path>.json`` records shapes and provenance."""
    path = Path(path)
    payload = ens.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ens.L, ens.M, ens.D, ens.hidden))
        fh.write(payload)
    sidecar = {
        "L": ens.L,
        "M": ens.M,
        "D": ens.D,
        "hidden": ens.hidden,
        "theta_dim": 2 * ens.D * ens.D,
        "w_dim": 2 * ens.hidden * ens.D,
        "dtype": "<f8",
        "layout": "header<4I then (layer, head) row-major, theta++w column-stacked",
    }
    if meta:
        sidecar.update(meta)
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_ensemble(path) -> ParamEnsemble:
    path = Path(path)
    raw = path.read_bytes()
    L, M, D, hidden = _HEADER.unpack(raw[: _HEADER.size])
    flat = np.frombuffer(raw[_HEADER.size :], dtype="<f8").astype(np.float64)
    return ParamEnsemble.from_flat(flat.reshape(L, M, enc.beta_dim(D, hidden)), D, hidden)
