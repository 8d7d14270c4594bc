"""Attention and MLP encoders, their exact derivatives, and growth probes.

The two concrete encoders acting on a token matrix ``Z`` of shape
``(D, N+1)`` are

* attention:  ``f(Z) = V @ Z @ softmax_cols(Z.T @ W @ Z)`` with square
  ``V, W`` of shape ``(D, D)``; parameter vector ``theta = vec[V] ++ vec[W]``
  (column-stacking, dimension ``2 D^2``),
* token-wise MLP:  ``h(Z) = W2 @ hrelu(W1 @ Z)`` with ``W1`` of shape
  ``(m, D)`` and ``W2`` of shape ``(D, m)``; parameter vector
  ``w = vec[W1] ++ vec[W2]`` (dimension ``2 m D``).

``hrelu`` is the C^1 huberized ReLU: 0 on (-inf, 0], x^2/2 on [0, 1],
x - 1/2 on [1, inf).  The MLP is 1-homogeneous in ``W2``.

Head-stacked kernels (`*_heads*`, `*_layer_*`) evaluate many parameter
particles against a batch of token matrices in broadcasted batched matmuls;
they are the hot path for the network forward/backward sweeps and are exact
re-arrangements of the scalar operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import col2_norm, devectorize, vectorize
from .sampling import uniform_ball


def softmax_cols(a) -> np.ndarray:
    """Column-wise softmax with max-subtraction stabilization.

    Each output column is nonnegative, sums to one, and is invariant to
    adding a constant to the corresponding input column.
    """
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


def huberized_relu(x):
    """0 for x <= 0, x^2/2 on [0, 1], x - 1/2 for x >= 1 (C^1 everywhere).

    Computed as c * (x - c/2) with c = clip(x, 0, 1), which reproduces the
    piecewise values bitwise while staying branch-free.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.clip(x, 0.0, 1.0)
    out = c * (x - 0.5 * c)
    return float(out) if out.ndim == 0 else out


def huberized_relu_prime(x):
    """Derivative of :func:`huberized_relu`: 0, x, or 1 by branch, which is
    exactly clip(x, 0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.clip(x, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttnParam:
    """One attention head: value matrix V and reparametrized score matrix W."""

    V: np.ndarray
    W: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([vectorize(self.V), vectorize(self.W)])

    @classmethod
    def from_theta(cls, theta: np.ndarray, dim: int) -> "AttnParam":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != 2 * dim * dim:
            raise ValueError("theta length does not match 2*D^2")
        half = dim * dim
        return cls(devectorize(theta[:half], dim, dim), devectorize(theta[half:], dim, dim))

    @classmethod
    def zeros(cls, dim: int) -> "AttnParam":
        return cls(np.zeros((dim, dim)), np.zeros((dim, dim)))


@dataclass(frozen=True)
class MlpParam:
    """One MLP head: hidden matrix W1 (m x D) and output matrix W2 (D x m).

    W2 is the homogeneous block (scaling it scales the output), W1 the
    compact one.
    """

    W1: np.ndarray
    W2: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([vectorize(self.W1), vectorize(self.W2)])

    @classmethod
    def from_w(cls, w: np.ndarray, dim: int, hidden: int) -> "MlpParam":
        w = np.asarray(w, dtype=np.float64)
        if w.size != 2 * hidden * dim:
            raise ValueError("w length does not match 2*m*D")
        half = hidden * dim
        return cls(devectorize(w[:half], hidden, dim), devectorize(w[half:], dim, hidden))

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "MlpParam":
        return cls(np.zeros((hidden, dim)), np.zeros((dim, hidden)))


@dataclass(frozen=True)
class ParticleParam:
    """One parameter particle beta = (theta, w): an attention head plus an
    MLP head sharing a depth slot."""

    attn: AttnParam
    mlp: MlpParam

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([self.attn.theta, self.mlp.w])

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.attn.theta**2) + np.sum(self.mlp.w**2))

    @classmethod
    def from_beta(cls, beta: np.ndarray, dim: int, hidden: int) -> "ParticleParam":
        beta = np.asarray(beta, dtype=np.float64)
        cut = 2 * dim * dim
        return cls(AttnParam.from_theta(beta[:cut], dim), MlpParam.from_w(beta[cut:], dim, hidden))

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "ParticleParam":
        return cls(AttnParam.zeros(dim), MlpParam.zeros(dim, hidden))


def beta_dim(dim: int, hidden: int) -> int:
    """Length of the flat particle vector for token dim D and hidden width m."""
    return 2 * dim * dim + 2 * hidden * dim


# ---------------------------------------------------------------------------
# scalar encoder evaluations
# ---------------------------------------------------------------------------


def _check_tokens(Z: np.ndarray, dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != dim:
        raise ValueError(f"token matrix shape {Z.shape} incompatible with D={dim}")
    return Z


def attn_f(Z, p: AttnParam) -> np.ndarray:
    """Attention encoder V Z softmax_cols(Z^T W Z)."""
    Z = _check_tokens(Z, p.V.shape[0])
    return p.V @ Z @ softmax_cols(Z.T @ p.W @ Z)


def mlp_h(Z, p: MlpParam) -> np.ndarray:
    """Token-wise MLP encoder W2 hrelu(W1 Z)."""
    Z = _check_tokens(Z, p.W1.shape[1])
    return p.W2 @ huberized_relu(p.W1 @ Z)


def avg_g(Z, p: ParticleParam) -> np.ndarray:
    """Averaged encoder (f + h) / 2 for one particle."""
    return 0.5 * (attn_f(Z, p.attn) + mlp_h(Z, p.mlp))


# ---------------------------------------------------------------------------
# scalar derivatives
# ---------------------------------------------------------------------------


def _attn_softmax_parts(Z: np.ndarray, p: AttnParam):
    S = softmax_cols(Z.T @ p.W @ Z)
    return S


def attn_jacobian_T(Z, p: AttnParam) -> np.ndarray:
    """Jacobian of vec[f(Z)] with respect to vec[Z] (column-stacking).

    Block (i, j) = d f[:, i] / d z_j =
        S[j, i] V + V Z Q_i (e_j (W z_i)^T + delta_ij Z^T W)
    with Q_i = diag(s_i) - s_i s_i^T for the softmaxed column s_i = S[:, i].
    """
    Z = _check_tokens(Z, p.V.shape[0])
    D, n = Z.shape
    S = _attn_softmax_parts(Z, p)
    VZ = p.V @ Z
    WZ = p.W @ Z                      # column i is W z_i
    ZtW = Z.T @ p.W
    J = np.zeros((D * n, D * n))
    for i in range(n):
        s = S[:, i]
        Qi = np.diag(s) - np.outer(s, s)
        VZQ = VZ @ Qi                 # (D, n)
        common = VZQ @ ZtW            # the delta_ij term, (D, D)
        for j in range(n):
            block = S[j, i] * p.V + np.outer(VZQ[:, j], WZ[:, i])
            if i == j:
                block = block + common
            J[i * D:(i + 1) * D, j * D:(j + 1) * D] = block
    return J


def mlp_jacobian_T(Z, p: MlpParam) -> np.ndarray:
    """Jacobian of vec[h(Z)] w.r.t. vec[Z]; block diagonal since the MLP acts
    token-wise: block (i, i) = W2 diag(hrelu'(W1 z_i)) W1."""
    Z = _check_tokens(Z, p.W1.shape[1])
    D, n = Z.shape
    sig = huberized_relu_prime(p.W1 @ Z)   # (m, n)
    J = np.zeros((D * n, D * n))
    for i in range(n):
        J[i * D:(i + 1) * D, i * D:(i + 1) * D] = p.W2 @ (sig[:, i][:, None] * p.W1)
    return J


def attn_grad_param(Z, p: AttnParam, U) -> np.ndarray:
    """Gradient of Tr(f(Z)^T U) with respect to theta = vec[V] ++ vec[W]."""
    Z = _check_tokens(Z, p.V.shape[0])
    U = _check_tokens(U, Z.shape[0])
    S = _attn_softmax_parts(Z, p)
    G_V = U @ S.T @ Z.T
    C = (p.V @ Z).T @ U               # column k is (VZ)^T u_k
    SC = S * C
    B = SC - S * SC.sum(axis=0, keepdims=True)
    G_W = Z @ B @ Z.T
    return np.concatenate([vectorize(G_V), vectorize(G_W)])


def mlp_grad_param(Z, p: MlpParam, U) -> np.ndarray:
    """Gradient of Tr(h(Z)^T U) with respect to w = vec[W1] ++ vec[W2]."""
    Z = _check_tokens(Z, p.W1.shape[1])
    U = _check_tokens(U, Z.shape[0])
    Y = p.W1 @ Z
    G_W2 = U @ huberized_relu(Y).T
    G_W1 = (huberized_relu_prime(Y) * (p.W2.T @ U)) @ Z.T
    return np.concatenate([vectorize(G_W1), vectorize(G_W2)])


def attn_state_grad(Z, p: AttnParam, U) -> np.ndarray:
    """Gradient of Tr(f(Z)^T U) with respect to Z (vector-Jacobian product)."""
    Z = _check_tokens(Z, p.V.shape[0])
    S = _attn_softmax_parts(Z, p)
    C = (p.V @ Z).T @ U
    SC = S * C
    B = SC - S * SC.sum(axis=0, keepdims=True)
    return p.V.T @ U @ S.T + p.W @ Z @ B.T + p.W.T @ Z @ B


def mlp_state_grad(Z, p: MlpParam, U) -> np.ndarray:
    """Gradient of Tr(h(Z)^T U) with respect to Z."""
    Z = _check_tokens(Z, p.W1.shape[1])
    Y = p.W1 @ Z
    return p.W1.T @ (huberized_relu_prime(Y) * (p.W2.T @ U))


# ---------------------------------------------------------------------------
# head-stacked kernels (batch axis b, head axis m)
# ---------------------------------------------------------------------------
# Z, U: (B, D, N+1); Vs, Ws: (M, D, D); W1s: (M, m, D); W2s: (M, D, m).
# Everything below is broadcasted batched matmul: (1, M, ., .) against
# (B, 1, ., .) gives per-(sample, head) products in one BLAS pass.


def _bt(a):
    """Transpose the trailing matrix axes."""
    return a.swapaxes(-1, -2)


def _attn_scores(Z, Vs, Ws):
    WZ = Ws[None] @ Z[:, None]
    return softmax_cols(_bt(Z)[:, None] @ WZ)


def attn_heads(Z, Vs, Ws) -> np.ndarray:
    """Per-head attention outputs, shape (B, M, D, N+1)."""
    S = _attn_scores(Z, Vs, Ws)
    return Vs[None] @ (Z[:, None] @ S)


def attn_heads_mean(Z, Vs, Ws) -> np.ndarray:
    """Head-averaged attention output, shape (B, D, N+1)."""
    return attn_heads(Z, Vs, Ws).mean(axis=1)


def mlp_heads(Z, W1s, W2s) -> np.ndarray:
    """Per-head MLP outputs, shape (B, M, D, N+1)."""
    Y = W1s[None] @ Z[:, None]
    return W2s[None] @ huberized_relu(Y)


def mlp_heads_mean(Z, W1s, W2s) -> np.ndarray:
    return mlp_heads(Z, W1s, W2s).mean(axis=1)


def _attn_cotangent_parts(Z, Vs, Ws, U):
    S = _attn_scores(Z, Vs, Ws)
    VZ = Vs[None] @ Z[:, None]
    C = _bt(VZ) @ U[:, None]
    SC = S * C
    B = SC - S * SC.sum(axis=2, keepdims=True)
    return S, B


def attn_state_grad_mean(Z, Vs, Ws, U) -> np.ndarray:
    """Head-averaged gradient of Tr(f^T U) w.r.t. Z, shape (B, D, N+1)."""
    S, B = _attn_cotangent_parts(Z, Vs, Ws, U)
    t1 = (_bt(Vs)[None] @ U[:, None]) @ _bt(S)
    t2 = (Ws[None] @ Z[:, None]) @ _bt(B)
    t3 = (_bt(Ws)[None] @ Z[:, None]) @ B
    return (t1 + t2 + t3).mean(axis=1)


def mlp_state_grad_mean(Z, W1s, W2s, U) -> np.ndarray:
    """Head-averaged gradient of Tr(h^T U) w.r.t. Z, shape (B, D, N+1)."""
    Y = W1s[None] @ Z[:, None]
    T2 = huberized_relu_prime(Y) * (_bt(W2s)[None] @ U[:, None])
    return (_bt(W1s)[None] @ T2).mean(axis=1)


def attn_grad_param_heads(Z, Vs, Ws, U):
    """Batch-averaged per-head gradients of Tr(f^T U) w.r.t. (V, W).

    Returns (G_V, G_W) of shapes (M, D, D); the average runs over the batch
    axis in fixed order.
    """
    S, B = _attn_cotangent_parts(Z, Vs, Ws, U)
    ZS = Z[:, None] @ S
    G_V = (U[:, None] @ _bt(ZS)).mean(axis=0)
    G_W = ((Z[:, None] @ B) @ _bt(Z)[:, None]).mean(axis=0)
    return G_V, G_W


def mlp_grad_param_heads(Z, W1s, W2s, U):
    """Batch-averaged per-head gradients of Tr(h^T U) w.r.t. (W1, W2)."""
    Y = W1s[None] @ Z[:, None]
    act = huberized_relu(Y)
    T2 = huberized_relu_prime(Y) * (_bt(W2s)[None] @ U[:, None])
    G_W1 = (T2 @ _bt(Z)[:, None]).mean(axis=0)
    G_W2 = (U[:, None] @ _bt(act)).mean(axis=0)
    return G_W1, G_W2


# ---------------------------------------------------------------------------
# fused layer kernels: one forward pass caches the nonlinearities, one
# backward pass reuses them for the state VJP and the parameter gradients
# ---------------------------------------------------------------------------


@dataclass
class AttnLayerCache:
    S: np.ndarray    # (B, M, N+1, N+1) softmaxed scores
    WZ: np.ndarray   # (B, M, D, N+1)
    ZS: np.ndarray   # (B, M, D, N+1)


@dataclass
class MlpLayerCache:
    Y: np.ndarray    # (B, M, m, N+1) preactivations
    act: np.ndarray  # huberized_relu(Y)


def attn_layer_forward(Z, Vs, Ws):
    """(head-averaged output, cache) for one attention layer."""
    WZ = Ws[None] @ Z[:, None]
    S = softmax_cols(_bt(Z)[:, None] @ WZ)
    ZS = Z[:, None] @ S
    out = (Vs[None] @ ZS).mean(axis=1)
    return out, AttnLayerCache(S=S, WZ=WZ, ZS=ZS)


def attn_layer_backward(Z, Vs, Ws, cache: AttnLayerCache, U, with_param: bool):
    """(state gradient mean, G_V, G_W) of Tr(f^T U) reusing the forward cache;
    the parameter gradients are None unless requested."""
    S = cache.S
    VZ = Vs[None] @ Z[:, None]
    C = _bt(VZ) @ U[:, None]
    SC = S * C
    B = SC - S * SC.sum(axis=2, keepdims=True)
    t1 = (_bt(Vs)[None] @ U[:, None]) @ _bt(S)
    t2 = cache.WZ @ _bt(B)
    t3 = (_bt(Ws)[None] @ Z[:, None]) @ B
    state_grad = (t1 + t2 + t3).mean(axis=1)
    if not with_param:
        return state_grad, None, None
    G_V = (U[:, None] @ _bt(cache.ZS)).mean(axis=0)
    G_W = ((Z[:, None] @ B) @ _bt(Z)[:, None]).mean(axis=0)
    return state_grad, G_V, G_W


def mlp_layer_forward(Z, W1s, W2s):
    """(head-averaged output, cache) for one MLP layer."""
    Y = W1s[None] @ Z[:, None]
    act = huberized_relu(Y)
    out = (W2s[None] @ act).mean(axis=1)
    return out, MlpLayerCache(Y=Y, act=act)


def mlp_layer_backward(Z, W1s, W2s, cache: MlpLayerCache, U, with_param: bool):
    """(state gradient mean, G_W1, G_W2) of Tr(h^T U) reusing the cache."""
    T2 = huberized_relu_prime(cache.Y) * (_bt(W2s)[None] @ U[:, None])
    state_grad = (_bt(W1s)[None] @ T2).mean(axis=1)
    if not with_param:
        return state_grad, None, None
    G_W1 = (T2 @ _bt(Z)[:, None]).mean(axis=0)
    G_W2 = (U[:, None] @ _bt(cache.act)).mean(axis=0)
    return state_grad, G_W1, G_W2


# ---------------------------------------------------------------------------
# empirical assumption probes
# ---------------------------------------------------------------------------


@dataclass
class AssumptionProbeReport:
    """Empirical envelopes for one encoder over a sampled (T, param) cloud.

    ``growth_k_hat`` is the fitted constant in
    ``|enc(T)|_2col <= K |T|_2col (1 + |a| + |a|^2)``; ``phi_param_hat`` and
    ``phi_state_hat`` are the fitted constants for the parameter-gradient and
    state-Jacobian envelopes.  ``max_violation_margin`` is the worst signed
    slack of the sharp per-encoder growth bound (attention:
    ``|theta| |T|_2col``; MLP: ``2 |w|^2 |T|_2col``); a value <= 0 means the
    bound held on every sample.
    """

    encoder: str
    n_samples: int
    growth_k_hat: float
    phi_param_hat: float
    phi_state_hat: float
    max_violation_margin: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "encoder": self.encoder,
                "n_samples": self.n_samples,
                "growth_k_hat": self.growth_k_hat,
                "phi_param_hat": self.phi_param_hat,
                "phi_state_hat": self.phi_state_hat,
                "max_violation_margin": self.max_violation_margin,
            },
            indent=2,
        )

    @property
    def passed(self) -> bool:
        return self.max_violation_margin <= 0.0


def _sample_token_matrix(rng: np.random.Generator, dim: int, n_cols: int, radius: float) -> np.ndarray:
    T = rng.standard_normal((dim, n_cols))
    c = col2_norm(T)
    if c == 0.0 or radius == 0.0:
        return np.zeros((dim, n_cols))
    return T * (radius * rng.random() / c)


def probe_assumptions(
    encoder: str,
    n_samples: int,
    radius_T: float,
    radius_beta: float,
    dim: int,
    n_tokens: int,
    hidden: int | None = None,
    seed: int = 0,
    with_derivatives: bool = True,
) -> AssumptionProbeReport:
    """Sample (T, param) pairs within the given radii and fit the growth and
    derivative envelopes for one encoder as max ratios.

    ``encoder`` is ``"attn"`` or ``"mlp"``; ``n_tokens`` is the number of
    matrix columns N+1.  Derivative envelopes (spectral Jacobian norms) are
    skipped when ``with_derivatives`` is false, which makes very large sample
    counts cheap.
    """
    if encoder not in ("attn", "mlp"):
        raise ValueError(f"unknown encoder id {encoder!r}")
    if encoder == "mlp" and hidden is None:
        raise ValueError("mlp probe needs the hidden width")
    rng = np.random.default_rng(seed)
    k_hat = 0.0
    phi_p = 0.0
    phi_t = 0.0
    margin = -np.inf
    for _ in range(n_samples):
        T = _sample_token_matrix(rng, dim, n_tokens, radius_T)
        cT = col2_norm(T)
        if encoder == "attn":
            theta = uniform_ball(rng, 1, 2 * dim * dim, radius_beta)[0]
            p = AttnParam.from_theta(theta, dim)
            out = attn_f(T, p)
            a_norm = float(np.linalg.norm(theta))
            sharp = a_norm * cT
        else:
            w = uniform_ball(rng, 1, 2 * hidden * dim, radius_beta)[0]
            p = MlpParam.from_w(w, dim, hidden)
            out = mlp_h(T, p)
            a_norm = float(np.linalg.norm(w))
            sharp = 2.0 * a_norm**2 * cT
        c_out = col2_norm(out)
        margin = max(margin, c_out - sharp)
        poly = 1.0 + a_norm + a_norm**2
        if cT > 0.0:
            k_hat = max(k_hat, c_out / (cT * poly))
        if with_derivatives:
            grad_fn = attn_grad_param if encoder == "attn" else mlp_grad_param
            J = attn_jacobian_T(T, p) if encoder == "attn" else mlp_jacobian_T(T, p)
            col_grad = 0.0
            for i in range(n_tokens):
                # Jacobian of output column i w.r.t. the parameter vector,
                # assembled row by row from unit cotangents.
                rows = np.stack([grad_fn(T, p, _unit_cot(dim, n_tokens, r, i)) for r in range(dim)])
                col_grad = max(col_grad, float(np.linalg.norm(rows, 2)))
            phi_p = max(phi_p, col_grad / (1.0 + a_norm))
            phi_t = max(phi_t, float(np.linalg.norm(J, 2)) / poly)
    return AssumptionProbeReport(
        encoder=encoder,
        n_samples=n_samples,
        growth_k_hat=k_hat,
        phi_param_hat=phi_p,
        phi_state_hat=phi_t,
        max_violation_margin=float(margin),
    )


def _unit_cot(dim: int, n_cols: int, row: int, col: int) -> np.ndarray:
    U = np.zeros((dim, n_cols))
    U[row, col] = 1.0
    return U


def fitted_growth_constant(
    n_samples: int,
    radius_T: float,
    radius_beta: float,
    dim: int,
    n_tokens: int,
    hidden: int,
    seed: int = 0,
) -> float:
    """Empirical growth constant K covering both encoders at the given radii:
    the max over samples of |enc(T)|_2col / (|T|_2col (1 + |a| + |a|^2))."""
    ra = probe_assumptions(
        "attn", n_samples, radius_T, radius_beta, dim, n_tokens, seed=seed, with_derivatives=False
    )
    rm = probe_assumptions(
        "mlp", n_samples, radius_T, radius_beta, dim, n_tokens, hidden=hidden,
        seed=seed + 1, with_derivatives=False,
    )
    return max(ra.growth_k_hat, rm.growth_k_hat)
