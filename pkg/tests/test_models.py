import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepboed.models import (CavityArray, ConjugateGaussian, QubitChain, REFERENCE_CAVITY_J,
                             REFERENCE_CAVITY_OMEGA, REFERENCE_QUBIT_OMEGA, binomial_logpmf,
                             conjugate_mi, conjugate_posterior, model_from_config,
                             reference_cavity, reference_qubits)

# ---------------------------------------------------------------------------
# independent oracles


def gauss_solve(a, b):
    """Complex Gaussian elimination with partial pivoting, plain Python lists."""
    n = len(a)
    m = [list(map(complex, row)) + [complex(b[i])] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        assert abs(m[piv][col]) > 1e-300, "singular system"
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0j] * n
    for r in reversed(range(n)):
        acc = m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))
        x[r] = acc / m[r][r]
    return x


def cavity_s_oracle(omega, J, k_int, k_ext, w):
    """Full scattering matrix from its definition, via dense Gaussian elimination."""
    n = len(omega)
    kap = [k_int] * n
    kap[0] += k_ext
    if n > 1:
        kap[-1] += k_ext
    ext = [0.0] * n
    ext[0] = k_ext
    ext[-1] = k_ext
    a = [[0j] * n for _ in range(n)]
    for i in range(n):
        a[i][i] = -1j * (w - omega[i]) + kap[i] / 2
        if i + 1 < n:
            a[i][i + 1] = 1j * J[i]  # -i * (-J)
            a[i + 1][i] = 1j * J[i]
    cols = [gauss_solve(a, [1.0 if r == c else 0.0 for r in range(n)]) for c in range(n)]
    g = [[cols[c][r] for c in range(n)] for r in range(n)]
    return [[(1.0 if r == c else 0.0) - math.sqrt(ext[r]) * g[r][c] * math.sqrt(ext[c])
             for c in range(n)] for r in range(n)]


def expm_oracle(a):
    """Scaling and squaring with a 20-term Taylor series."""
    a = np.asarray(a, dtype=complex)
    norm = np.max(np.sum(np.abs(a), axis=1))
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0 else 0
    b = a / 2**s
    out, term = np.eye(len(a), dtype=complex), np.eye(len(a), dtype=complex)
    for k in range(1, 21):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def two_qubit_p_up_oracle(w0, w1, J, t):
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sz = np.diag([-1.0, 1.0]).astype(complex)  # basis index 1 is "up"
    eye = np.eye(2)
    h = w0 * np.kron(sz, eye) + w1 * np.kron(eye, sz) + J * np.kron(sx, sx)
    vals, vecs = np.linalg.eigh(h)
    psi = vecs[:, 0]
    psi = psi / np.exp(1j * np.angle(psi[np.argmax(np.abs(psi) > 1e-12)]))
    pulse = np.kron(expm_oracle(-1j * math.pi / 2 * sx), eye)
    psi = expm_oracle(-1j * h * t) @ (pulse @ psi)
    proj = np.kron(np.diag([0.0, 1.0]), eye)
    return float(np.real(np.conj(psi) @ proj @ psi))


# ---------------------------------------------------------------------------
# cavity array


def test_single_cavity_on_resonance_is_minus_one():
    m = CavityArray(N=1, J=(), kappa_int=0.0, kappa_ext=1.0)
    s = m.response(np.array([[0.37]]), [0.37])
    assert abs(s[0] - (-1.0)) < 1e-12


def test_reference_response_matches_dense_oracle():
    m = reference_cavity(6)
    lam = np.array(REFERENCE_CAVITY_OMEGA)
    for w in (0.0, -3.3, 1.04, 7.5):
        got = m.response(lam, [w])[0]
        ref = cavity_s_oracle(list(REFERENCE_CAVITY_OMEGA), list(REFERENCE_CAVITY_J), 0.5, 0.5, w)
        assert abs(got - ref[0][5]) < 1e-10
        assert abs(m.reflection(lam, [w])[0] - ref[0][0]) < 1e-10


def test_reference_tables():
    assert REFERENCE_CAVITY_OMEGA == (1.040, 0.326, 0.520, 0.900, -0.466, 0.004)
    assert REFERENCE_CAVITY_J == (2.733, 2.615, 1.956, 1.568, 2.620)
    m = reference_cavity()
    assert (m.kappa_int, m.kappa_ext, m.eps, m.domain) == (0.5, 0.5, 0.05, (-12.0, 12.0))
    q = reference_qubits()
    assert q.true_lambda == REFERENCE_QUBIT_OMEGA == (1.163, 1.003, 1.045, 0.910)
    assert (q.J, q.n_shots, q.domain) == (1.7, 100, (0.0, 5.0))


def test_flux_conservation_lossless():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        m = CavityArray(N=n, J=tuple(rng.uniform(0.5, 3, size=n - 1)), kappa_int=0.0,
                        kappa_ext=float(rng.uniform(0.2, 2)))
        lam = rng.normal(size=(1, n))
        w = [float(rng.uniform(-12, 12))]
        flux = abs(m.reflection(lam, w)[0]) ** 2 + abs(m.response(lam, w)[0]) ** 2
        worst = max(worst, abs(flux - 1))
    assert worst < 1e-10


def test_flux_oracle_agrees():
    ref = cavity_s_oracle([0.3, -0.2, 0.5], [1.0, 2.0], 0.0, 0.7, 0.4)
    assert abs(abs(ref[0][0]) ** 2 + abs(ref[0][2]) ** 2 - 1) < 1e-12


def test_kappa_vector_and_omega_matrix():
    m = reference_cavity(4)
    np.testing.assert_allclose(m.kappa, [1.0, 0.5, 0.5, 1.0])
    om = m.omega_matrix(np.zeros(4))
    np.testing.assert_array_equal(om, om.T)
    assert np.count_nonzero(np.triu(om, 2)) == 0


@pytest.mark.parametrize("n", [2, 5, 12])
def test_uniform_band_eigenvalues(n):
    J = 1.3
    m = CavityArray(N=n, J=(J,) * (n - 1))
    eig = np.sort(np.linalg.eigvalsh(m.omega_matrix(np.zeros(n))))
    ref = np.sort(2 * J * np.cos(np.arange(1, n + 1) * np.pi / (n + 1)))
    np.testing.assert_allclose(eig, ref, atol=1e-12)
    assert eig.max() - eig.min() < 4 * J


def test_response_derivative_matches_fd():
    m = reference_cavity(6)
    lam = np.array(REFERENCE_CAVITY_OMEGA)[None, :].repeat(5, 0)
    w = np.array([-4.0, -1.0, 0.0, 0.7, 3.0])
    s, ds = m.response_derivative(lam, w)
    h = 1e-6
    fd = (m.response(lam, w + h) - m.response(lam, w - h)) / (2 * h)
    np.testing.assert_allclose(s, m.response(lam, w), atol=1e-14)
    assert np.max(np.abs(ds - fd)) < 1e-6


def test_cavity_noise_statistics():
    m = reference_cavity(3)
    lam = np.array(REFERENCE_CAVITY_OMEGA[:3])
    n = 100_000
    y = m.simulate(np.repeat(lam[None, :], n, 0), np.full(n, 0.5), np.random.default_rng(0))
    s = m.response(lam, [0.5])[0]
    np.testing.assert_allclose(y.std(axis=0), m.eps, rtol=0.02)
    assert np.all(np.abs(y.mean(axis=0) - [s.real, s.imag]) < 4 * m.eps / math.sqrt(n))


def test_cavity_zero_noise_limit():
    m = reference_cavity(3, eps=1e-300)
    lam = np.array([REFERENCE_CAVITY_OMEGA[:3]])
    s = m.response(lam, [1.0])[0]
    y = m.simulate(lam, [1.0], np.random.default_rng(0))[0]
    np.testing.assert_array_equal(y, [s.real, s.imag])


def test_cavity_log_likelihood():
    m = reference_cavity(3)
    lam = np.array([REFERENCE_CAVITY_OMEGA[:3]])
    s = m.response(lam, [0.0])[0]
    y0 = np.array([[s.real, s.imag]])
    mode = m.log_likelihood(y0, lam, [0.0])[0]
    assert mode == pytest.approx(-2 * 0.5 * math.log(2 * math.pi * m.eps**2), abs=1e-12)
    shifted = m.log_likelihood(y0 + [m.eps, 0.0], lam, [0.0])[0]
    assert mode - shifted == pytest.approx(0.5, abs=1e-12)
    g = np.linspace(-6 * m.eps, 6 * m.eps, 401)
    Y1, Y2 = np.meshgrid(s.real + g, s.imag + g, indexing="ij")
    ys = np.stack([Y1.ravel(), Y2.ravel()], axis=1)
    dens = np.exp(m.log_likelihood(ys, np.repeat(lam, len(ys), 0), np.zeros(len(ys)))).reshape(401, 401)
    mass = np.trapezoid(np.trapezoid(dens, g, axis=1), g)
    assert abs(mass - 1) < 1e-3


def test_cavity_validation():
    with pytest.raises(ValueError):
        CavityArray(N=3, J=(1.0,))
    with pytest.raises(ValueError):
        CavityArray(N=2, J=(1.0,), eps=0.0)


# ---------------------------------------------------------------------------
# qubit chain


@pytest.mark.parametrize("n", [1, 2, 3])
def test_decoupled_chain_stays_up(n):
    m = QubitChain(N=n, J=0.0)
    lam = np.array([[0.8, 1.1, 1.3][:n]])
    t = np.linspace(0, 5, 21)
    p = m.p_up(np.repeat(lam, 21, 0), t)
    np.testing.assert_allclose(p, 1.0, atol=1e-12)
    k = m.simulate(np.repeat(lam, 50, 0), np.full(50, 2.0), np.random.default_rng(0))
    assert np.all(k == m.n_shots)


def test_two_qubits_match_expm_oracle():
    m = QubitChain(N=2, J=0.83)
    lam = np.array([0.7, 1.4])
    t = np.linspace(0, 5, 21)
    got = m.p_up(np.repeat(lam[None, :], len(t), 0), t)
    ref = [two_qubit_p_up_oracle(0.7, 1.4, 0.83, tt) for tt in t]
    np.testing.assert_allclose(got, ref, atol=1e-8)


def test_reference_chain_not_fully_up_at_zero():
    m = reference_qubits(4)
    p0 = m.p_up(np.array([REFERENCE_QUBIT_OMEGA]), [0.0])[0]
    assert p0 < 1.0
    assert 0.0 <= p0


def test_state_norm_through_pipeline():
    m = reference_qubits(4)
    lam = np.array([REFERENCE_QUBIT_OMEGA, [1.0, 0.8, 1.2, 1.1]])
    energies, vectors, coeffs = m.spectrum(lam)
    ground = vectors[:, :, 0]
    np.testing.assert_allclose(np.linalg.norm(ground, axis=1), 1.0, atol=1e-10)
    pulsed = m.apply_pulse(ground)
    np.testing.assert_allclose(np.linalg.norm(pulsed, axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(coeffs, axis=1), 1.0, atol=1e-10)
    for t in (0.0, 1.3, 5.0):
        psi = m.evolve((energies, vectors, coeffs), [t])
        np.testing.assert_allclose(np.linalg.norm(psi, axis=1), 1.0, atol=1e-10)


def test_ground_state_phase_and_energy():
    m = reference_qubits(3)
    lam = np.array([REFERENCE_QUBIT_OMEGA[:3]])
    energies, vectors, _ = m.spectrum(lam)
    h = m.hamiltonian(lam)[0]
    np.testing.assert_allclose(energies[0], np.linalg.eigvalsh(h), atol=1e-10)
    ground = vectors[0, :, 0]
    first = ground[np.argmax(np.abs(ground) > 1e-12)]
    np.testing.assert_allclose(h @ ground, energies[0, 0] * ground, atol=1e-10)
    assert first > 0 or (vectors[0, :, 0] * np.sign(first))[np.argmax(np.abs(ground) > 1e-12)] > 0


def test_degenerate_ground_state_warns():
    m = QubitChain(N=2, J=0.0)
    with pytest.warns(RuntimeWarning):
        m.spectrum(np.array([[0.0, 1.0]]))


def test_binomial_mean_and_pmf():
    m = reference_qubits(2)
    lam = np.array([REFERENCE_QUBIT_OMEGA[:2]])
    t = 1.7
    p = m.p_up(lam, [t])[0]
    n_draws = 10_000
    k = m.simulate(np.repeat(lam, n_draws, 0), np.full(n_draws, t), np.random.default_rng(3))[:, 0]
    n = m.n_shots
    assert abs(k.mean() / n - p) < 3 * math.sqrt(p * (1 - p) / (n * n_draws))
    emp = np.bincount(k.astype(int), minlength=n + 1) / n_draws
    pmf = np.exp(m.log_likelihood(np.arange(n + 1), np.repeat(lam, n + 1, 0), np.full(n + 1, t)))
    assert 0.5 * np.sum(np.abs(emp - pmf)) < 0.02


def test_binomial_logpmf_oracles():
    assert binomial_logpmf(0, 1, 0.5) == pytest.approx(math.log(0.5), abs=1e-15)
    for n, p in [(1, 0.3), (100, 0.42), (37, 1e-15), (5, 1.0)]:
        total = np.sum(np.exp(binomial_logpmf(np.arange(n + 1), n, p)))
        assert abs(total - 1) < 1e-10
    m = reference_qubits(4)
    p = m.p_up(np.array([REFERENCE_QUBIT_OMEGA]), [2.2])[0]
    k = round(100 * p)
    ref = math.log(math.comb(100, k)) + k * math.log(p) + (100 - k) * math.log(1 - p)
    assert abs(m.log_likelihood(np.array([k]), np.array([REFERENCE_QUBIT_OMEGA]), [2.2])[0] - ref) < 1e-9


def test_count_out_of_range():
    m = reference_qubits(2)
    with pytest.raises(ValueError):
        m.log_likelihood(np.array([101]), np.array([REFERENCE_QUBIT_OMEGA[:2]]), [0.0])
    with pytest.raises(ValueError):
        QubitChain(N=11)


def test_qubit_simulator_cache_matches_direct():
    m = reference_qubits(3)
    lam = np.random.default_rng(0).normal(1.0, 0.25, size=(20, 3))
    sim = m.bind(lam)
    t = np.linspace(0, 5, 20)
    np.testing.assert_allclose(sim.p_up(t), m.p_up(lam, t), atol=1e-13)
    idx = np.array([3, 3, 7])
    np.testing.assert_allclose(sim.p_up([1.0, 2.0, 3.0], idx), m.p_up(lam[idx], [1.0, 2.0, 3.0]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(0.2, 2.0), st.floats(0.0, 3.0), st.floats(0.0, 5.0))
def test_p_up_is_a_probability(w0, w1, J, t):
    p = QubitChain(N=2, J=J).p_up(np.array([[w0, w1]]), [t])[0]
    assert 0.0 <= p <= 1.0


# ---------------------------------------------------------------------------
# conjugate reference model


def test_conjugate_mutual_information():
    assert conjugate_mi(ConjugateGaussian()) == pytest.approx(0.5 * math.log(2), abs=1e-15)
    assert conjugate_mi(ConjugateGaussian()) == pytest.approx(0.34657, abs=1e-5)


def test_conjugate_posterior_limits():
    m = ConjugateGaussian(sigma0=1.5, mu0=0.3)
    assert conjugate_posterior(m, []) == (0.3, 1.5)
    noisy = ConjugateGaussian(sigma0=1.5, sigma_eps=1e8)
    assert conjugate_posterior(noisy, [(0.0, 2.0)])[1] == pytest.approx(1.5, rel=1e-9)
    mean, std = conjugate_posterior(ConjugateGaussian(), [(0.0, 1.0)])
    assert (mean, std) == pytest.approx((0.5, math.sqrt(0.5)))


def test_conjugate_noise_slope():
    m = ConjugateGaussian(noise_slope=1.0)
    np.testing.assert_allclose(m.noise_std([-1.0, 0.0, 0.5]), [2.0, 1.0, 1.5])
    assert m.mutual_information(0.0) > m.mutual_information(0.5)


def test_model_config_round_trip():
    for m in (reference_cavity(3), reference_qubits(2), ConjugateGaussian(noise_slope=0.5)):
        assert model_from_config(m.to_config()) == m
    with pytest.raises(ValueError):
        model_from_config({"type": "laser"})
