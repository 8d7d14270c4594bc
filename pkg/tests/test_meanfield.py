import numpy as np
import pytest

from mftlab import data as icl
from mftlab import encoders as enc
from mftlab import meanfield as mf
from mftlab import sampling
from mftlab.linalg import col2_norm


def zero_risk_dataset(D, N, count=2):
    return icl.DataSet.from_samples([(np.zeros((D, N + 1)), 0.0)] * count, read_row=D - 2)


def random_dataset(rng, D, N, count):
    samples = [(rng.standard_normal((D, N + 1)), float(rng.standard_normal()))
               for _ in range(count)]
    return icl.DataSet.from_samples(samples, read_row=D - 2)


def scaled_rho(rho, scale):
    return mf.SlicedDistribution(scale * rho.V, scale * rho.W, scale * rho.W1, scale * rho.W2)


# ---------------------------------------------------------------------------
# initial distribution sampling
# ---------------------------------------------------------------------------


def test_sample_rho0_support_and_determinism():
    rho = mf.sample_rho0(S=3, P=50, radius=0.8, seed=9, D=3, hidden=4)
    norms = np.sqrt(rho.beta_sq_norms())
    assert np.all(norms <= 0.8 + 1e-12)
    again = mf.sample_rho0(S=3, P=50, radius=0.8, seed=9, D=3, hidden=4)
    assert np.array_equal(rho.V, again.V) and np.array_equal(rho.W2, again.W2)


def test_uniform_ball_moments_match_analytic():
    dim, radius, n = 10, 1.3, 100_000
    rng = np.random.default_rng(123)
    pts = sampling.uniform_ball(rng, n, dim, radius)
    want = sampling.ball_mean_sq_norm(dim, radius)
    got = float(np.mean(np.sum(pts**2, axis=1)))
    assert abs(got - want) <= 0.02 * want
    coord_sigma = np.sqrt(want / dim / n)
    assert np.all(np.abs(pts.mean(axis=0)) <= 3.0 * coord_sigma * np.sqrt(dim))


# ---------------------------------------------------------------------------
# continuous forward integration
# ---------------------------------------------------------------------------


def test_continuous_forward_zero_particles_is_constant(rng):
    rho = mf.SlicedDistribution.zeros(2, 3, 3, 4)
    H = rng.standard_normal((3, 4))
    trace = mf.continuous_forward(H, rho, steps=8)
    assert len(trace.states) == 9
    for state in trace.states:
        assert np.array_equal(state, H)


def test_continuous_forward_requires_aligned_grid():
    rho = mf.SlicedDistribution.zeros(3, 1, 3, 3)
    with pytest.raises(ValueError):
        mf.continuous_forward(np.zeros((3, 3)), rho, steps=8)


def test_dirac_matches_high_resolution_euler(rng):
    D, hidden, N = 3, 3, 2
    steps = 256
    rho = scaled_rho(mf.sample_rho0(1, 1, 1.0, seed=4, D=D, hidden=hidden), 0.02)
    H = rng.standard_normal((D, N + 1))
    trace = mf.continuous_forward(H, rho, steps=steps)
    particle = rho.particle(0, 0)
    n_euler = steps * 64
    T = H.copy()
    for _ in range(n_euler):
        T = T + (1.0 / n_euler) * enc.avg_g(T, particle)
    gap = np.max(np.abs(trace.states[-1] - T))
    assert gap <= 1e-8


def test_rk4_self_convergence_is_fourth_order(rng):
    D, hidden, N = 3, 3, 2
    rho = scaled_rho(mf.sample_rho0(1, 2, 1.0, seed=6, D=D, hidden=hidden), 0.8)
    H = rng.standard_normal((D, N + 1))
    ref = mf.continuous_forward(H, rho, steps=8 * 16).states[-1]
    err = {}
    for steps in (8, 16):
        got = mf.continuous_forward(H, rho, steps=steps).states[-1]
        err[steps] = np.max(np.abs(got - ref))
    assert err[16] > 1e-14  # above float noise, so the ratio is meaningful
    assert err[8] / err[16] >= 8.0


def test_continuous_trace_growth_bound(rng):
    D, hidden, N = 3, 4, 3
    rho = mf.sample_rho0(2, 8, 1.2, seed=13, D=D, hidden=hidden)
    H = rng.standard_normal((D, N + 1))
    trace = mf.continuous_forward(H, rho, steps=16)
    k_hat = enc.fitted_growth_constant(
        1500, radius_T=max(col2_norm(s) for s in trace.states),
        radius_beta=rho.max_norm(), dim=D, n_tokens=N + 1, hidden=hidden, seed=14,
    )
    from mftlab.model import output_bound

    bound = output_bound(col2_norm(H), k_hat, rho.mean_sq_norm())
    for state in trace.states:
        assert col2_norm(state) <= bound


# ---------------------------------------------------------------------------
# continuous adjoint
# ---------------------------------------------------------------------------


def test_continuous_backward_zero_residual(rng):
    D, hidden, N = 3, 3, 2
    rho = mf.sample_rho0(2, 2, 0.7, seed=3, D=D, hidden=hidden)
    H = rng.standard_normal((D, N + 1))
    trace = mf.continuous_forward(H, rho, steps=8)
    y = float(trace.states[-1][D - 2, -1])
    ps = mf.continuous_backward(H, y, trace, rho, read_row=D - 2)
    for p in ps:
        assert np.array_equal(p, np.zeros((D, N + 1)))


def test_continuous_backward_zero_particles_constant_seed(rng):
    D, N = 3, 2
    rho = mf.SlicedDistribution.zeros(2, 2, D, 3)
    H = rng.standard_normal((D, N + 1))
    trace = mf.continuous_forward(H, rho, steps=8)
    ps = mf.continuous_backward(H, 0.75, trace, rho, read_row=1)
    seed = np.zeros((D, N + 1))
    seed[1, -1] = H[1, -1] - 0.75
    for p in ps:
        assert np.allclose(p, seed, atol=1e-15)


def _rk4_from(T0, rho, start_idx, steps):
    """Test-local forward RK4 from grid index start_idx to t=1."""
    per_knot = steps // rho.S
    h = 1.0 / steps
    T = T0.copy()
    for k in range(start_idx, steps):
        knot = k // per_knot

        def drift(X):
            vals = [enc.avg_g(X, rho.particle(knot, j)) for j in range(rho.P)]
            return np.mean(vals, axis=0)
        k1 = drift(T)
        k2 = drift(T + 0.5 * h * k1)
        k3 = drift(T + 0.5 * h * k2)
        k4 = drift(T + h * k3)
        T = T + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return T


def test_continuous_adjoint_matches_fd_of_reintegrated_loss(rng):
    D, hidden, N = 3, 3, 2
    steps = 64
    rho = scaled_rho(mf.sample_rho0(2, 2, 1.0, seed=8, D=D, hidden=hidden), 0.6)
    H = 0.8 * rng.standard_normal((D, N + 1))
    y = 0.2
    read_row = D - 2
    trace = mf.continuous_forward(H, rho, steps=steps)
    ps = mf.continuous_backward(H, y, trace, rho, read_row=read_row)
    eps = 1e-5
    for idx in (0, steps // 4, steps // 2, steps):
        delta = rng.standard_normal((D, N + 1))
        inner = float(np.sum(ps[idx] * delta))

        def loss(X):
            final = _rk4_from(X, rho, idx, steps)
            return 0.5 * (final[read_row, -1] - y) ** 2

        fd = (loss(trace.states[idx] + eps * delta) - loss(trace.states[idx] - eps * delta)) / (2 * eps)
        assert abs(inner - fd) <= 1e-4 * max(abs(fd), 1e-3)


# ---------------------------------------------------------------------------
# functional gradient and particle drift
# ---------------------------------------------------------------------------


def test_functional_gradient_zero_residual_cases(rng):
    D, hidden, N = 3, 3, 2
    rho = mf.sample_rho0(2, 3, 0.8, seed=5, D=D, hidden=hidden)
    ds = zero_risk_dataset(D, N)
    cache = mf.compute_traces(ds, rho, steps=8)
    particle = enc.ParticleParam.from_beta(
        rng.standard_normal(enc.beta_dim(D, hidden)), D, hidden
    )
    assert mf.functional_gradient(cache, 0.0, particle, 0.5) == 0.0
    lam = 0.3
    got = mf.functional_gradient(cache, lam, particle, 0.25)
    assert got == pytest.approx(0.5 * lam * particle.norm_sq, rel=1e-15)


def test_functional_gradient_secant_slope_first_order(rng):
    D, hidden, N = 3, 3, 2
    steps = 256
    lam = 0.05
    rho = scaled_rho(mf.sample_rho0(1, 3, 1.0, seed=16, D=D, hidden=hidden), 0.7)
    ds = random_dataset(rng, D, N, 3)
    cache = mf.compute_traces(ds, rho, steps=steps)
    particle = enc.ParticleParam.from_beta(
        0.7 * rng.standard_normal(enc.beta_dim(D, hidden)), D, hidden
    )
    q0 = mf.mf_objective(ds, rho, lam, steps)
    inner_point = mf.functional_gradient_time_avg(cache, lam, particle)
    inner_mean = np.mean(
        [
            mf.functional_gradient_time_avg(
                cache, lam, rho.particle(0, j)
            )
            for j in range(rho.P)
        ]
    )
    pairing = inner_point - inner_mean
    errs = {}
    for eta in (1e-2, 1e-3, 1e-4):
        mix = mf.DiracMixture(rho, particle, eta)
        q_eta = mf.mf_risk(ds, mix, steps) + 0.5 * lam * mix.mean_sq_norm()
        errs[eta] = abs((q_eta - q0) / eta - pairing)
    assert errs[1e-2] / errs[1e-3] >= 5.0
    assert errs[1e-3] >= errs[1e-4] * 0.9
    assert errs[1e-4] <= 1e-3 * max(abs(pairing), 1.0)


def test_particle_drift_zero_residual_is_decay(rng):
    D, hidden, N = 3, 3, 2
    rho = mf.sample_rho0(2, 3, 0.8, seed=7, D=D, hidden=hidden)
    ds = zero_risk_dataset(D, N)
    cache = mf.compute_traces(ds, rho, steps=8)
    lam = 0.4
    beta = rng.standard_normal(enc.beta_dim(D, hidden))
    particle = enc.ParticleParam.from_beta(beta, D, hidden)
    drift = mf.particle_drift(cache, lam, particle, 0.5)
    assert np.allclose(drift, lam * beta, atol=1e-15)


def test_particle_drift_mlp_block_vanishes_at_zero(rng):
    D, hidden, N = 3, 3, 2
    rho = mf.sample_rho0(2, 2, 0.8, seed=11, D=D, hidden=hidden)
    ds = random_dataset(rng, D, N, 3)
    cache = mf.compute_traces(ds, rho, steps=8)
    particle = enc.ParticleParam(
        enc.AttnParam(rng.standard_normal((D, D)), rng.standard_normal((D, D))),
        enc.MlpParam.zeros(D, hidden),
    )
    drift = mf.particle_drift(cache, 0.0, particle, 0.25)
    w_block = drift[2 * D * D :]
    assert np.array_equal(w_block, np.zeros(2 * hidden * D))


def test_particle_drift_matches_fd_of_functional_gradient(rng):
    D, hidden, N = 3, 3, 2
    rho = scaled_rho(mf.sample_rho0(2, 2, 1.0, seed=19, D=D, hidden=hidden), 0.6)
    ds = random_dataset(rng, D, N, 3)
    cache = mf.compute_traces(ds, rho, steps=8)
    lam = 0.02
    t = 0.5
    beta0 = 0.8 * rng.standard_normal(enc.beta_dim(D, hidden))
    particle = enc.ParticleParam.from_beta(beta0, D, hidden)
    # preactivations clear of the activation kinks at the probed time
    Z = cache.forward[cache.grid_index(t)]
    Y = np.einsum("hd,bdn->bhn", particle.mlp.W1, Z)
    assert min(float(np.min(np.abs(Y))), float(np.min(np.abs(Y - 1.0)))) > 1e-3

    drift = mf.particle_drift(cache, lam, particle, t)
    eps = 1e-5
    for i in range(beta0.size):
        bp, bm = beta0.copy(), beta0.copy()
        bp[i] += eps
        bm[i] -= eps
        fp = mf.functional_gradient(cache, lam, enc.ParticleParam.from_beta(bp, D, hidden), t)
        fm = mf.functional_gradient(cache, lam, enc.ParticleParam.from_beta(bm, D, hidden), t)
        fd = (fp - fm) / (2 * eps)
        assert abs(drift[i] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_dirac_mixture_drift_is_convex_combination(rng):
    D, hidden = 3, 3
    rho = mf.sample_rho0(2, 3, 0.9, seed=21, D=D, hidden=hidden)
    particle = enc.ParticleParam.from_beta(
        rng.standard_normal(enc.beta_dim(D, hidden)), D, hidden
    )
    mix = mf.DiracMixture(rho, particle, eta=0.25)
    X = rng.standard_normal((2, D, 4))
    point = np.stack([enc.avg_g(X[b], particle) for b in range(2)])
    want = 0.75 * rho.mean_drift(X, 1) + 0.25 * point
    assert np.allclose(mix.mean_drift(X, 1), want, atol=1e-14)


# ---------------------------------------------------------------------------
# mean-field particle flow
# ---------------------------------------------------------------------------


def test_meanfield_flow_exponential_decay_on_zero_risk():
    D, hidden, N = 3, 3, 2
    rho0 = mf.sample_rho0(2, 4, 1.0, seed=2, D=D, hidden=hidden)
    ds = zero_risk_dataset(D, N)
    lam, dtau, tau_end = 1.0, 1e-2, 0.5
    res = mf.meanfield_flow(ds, rho0, lam, tau_end, dtau, steps_per_knot=4)
    factor = np.exp(-lam * tau_end)
    tol = lam**2 * dtau * tau_end  # explicit-Euler bias on the decay factor
    assert np.allclose(res.rho.V, factor * rho0.V, rtol=2 * tol, atol=1e-12)
    assert np.allclose(res.rho.W2, factor * rho0.W2, rtol=2 * tol, atol=1e-12)
    assert res.log.halvings == 0


def test_meanfield_flow_frozen_without_forcing():
    D, hidden, N = 3, 3, 2
    rho0 = mf.sample_rho0(2, 3, 0.9, seed=23, D=D, hidden=hidden)
    ds = zero_risk_dataset(D, N)
    res = mf.meanfield_flow(ds, rho0, lam=0.0, tau_end=0.05, dtau=1e-2, steps_per_knot=4)
    assert np.array_equal(res.rho.V, rho0.V)
    assert np.array_equal(res.rho.W1, rho0.W1)


def test_meanfield_flow_energy_non_increasing(rng):
    D, hidden, N = 4, 4, 3
    rho0 = mf.sample_rho0(2, 4, 1.0, seed=31, D=D, hidden=hidden)
    task = icl.IclTask(d=D - 2, N=N, a=np.full(D - 2, 1.0 / np.sqrt(D - 2)))
    ds = icl.generate(task, 8, seed=33)
    res = mf.meanfield_flow(ds, rho0, lam=1e-3, tau_end=0.03, dtau=1e-3, steps_per_knot=4)
    q = res.log.column("objective")
    assert np.all(np.diff(q) <= 1e-10)
    assert res.rho.V.shape == rho0.V.shape  # per-knot particle counts conserved


def test_meanfield_flow_permutation_equivariant():
    D, hidden, N = 3, 3, 2
    rho0 = mf.sample_rho0(2, 2, 1.0, seed=41, D=D, hidden=hidden)
    task = icl.IclTask(d=D - 2, N=N, a=np.array([1.0]))
    ds = icl.generate(task, 4, seed=42)
    swapped = mf.SlicedDistribution(
        rho0.V[:, ::-1].copy(), rho0.W[:, ::-1].copy(),
        rho0.W1[:, ::-1].copy(), rho0.W2[:, ::-1].copy(),
    )
    a = mf.meanfield_flow(ds, rho0, 1e-2, 0.02, 1e-2, steps_per_knot=4)
    b = mf.meanfield_flow(ds, swapped, 1e-2, 0.02, 1e-2, steps_per_knot=4)
    # two-particle knots: the head sum commutes exactly, so the swapped run
    # is the bitwise mirror of the original
    assert np.array_equal(a.rho.V, b.rho.V[:, ::-1])
    assert np.array_equal(a.rho.W1, b.rho.W1[:, ::-1])


def test_meanfield_flow_moment_bound(rng):
    D, hidden, N, radius, lam = 4, 4, 3, 1.0, 1e-2
    rho0 = mf.sample_rho0(2, 4, radius, seed=61, D=D, hidden=hidden)
    task = icl.IclTask(d=D - 2, N=N, a=np.full(D - 2, 1.0 / np.sqrt(D - 2)))
    ds = icl.generate(task, 6, seed=62)
    res = mf.meanfield_flow(ds, rho0, lam, 0.05, 1e-2, steps_per_knot=4)
    k_hat = enc.fitted_growth_constant(400, 2.0 * ds.bound, radius, dim=D,
                                       n_tokens=N + 1, hidden=hidden, seed=63)
    from mftlab.flow import moment_bound_a0

    a0_sq = moment_bound_a0(radius, lam, ds.bound, k_hat)
    assert np.all(res.log.column("mean_sq_norm") <= a0_sq)


def test_distribution_serialization_roundtrip(tmp_path):
    rho = mf.sample_rho0(3, 4, 0.9, seed=71, D=3, hidden=4)
    path = tmp_path / "rho.bin"
    mf.save_distribution(rho, path, radius=0.9, seed=71)
    back = mf.load_distribution(path)
    assert isinstance(back, mf.SlicedDistribution)
    assert np.array_equal(back.V, rho.V) and np.array_equal(back.W2, rho.W2)
    sidecar = (tmp_path / "rho.bin.json").read_text()
    assert '"knots": 3' in sidecar and '"radius": 0.9' in sidecar


def test_knot_continuity_estimate():
    rho = mf.sample_rho0(3, 5, 1.0, seed=81, D=3, hidden=3)
    est = mf.knot_continuity_estimate(rho)
    assert est.shape == (2,)
    assert np.all(est > 0) and np.all(np.isfinite(est))
    same = mf.SlicedDistribution(
        np.repeat(rho.V[:1], 3, axis=0), np.repeat(rho.W[:1], 3, axis=0),
        np.repeat(rho.W1[:1], 3, axis=0), np.repeat(rho.W2[:1], 3, axis=0),
    )
    assert np.all(mf.knot_continuity_estimate(same) == 0.0)


def test_meanfield_flow_records_snapshots():
    D, hidden, N = 3, 3, 2
    rho0 = mf.sample_rho0(2, 2, 0.8, seed=51, D=D, hidden=hidden)
    ds = zero_risk_dataset(D, N)
    res = mf.meanfield_flow(ds, rho0, 0.5, 0.03, 1e-2, steps_per_knot=4, record_every=1)
    assert len(res.snapshots) == 4  # tau = 0 plus three accepted steps
    assert res.snapshots[0][1].shape == (2, 2, enc.beta_dim(D, hidden))
