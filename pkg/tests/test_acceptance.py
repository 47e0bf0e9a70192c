"""End-to-end acceptance criteria, one or more tests per criterion.

Each test is named ``test_cNN_<topic>``; the conftest hook turns their
outcomes into one PASS/FAIL line per criterion at the end of the session.
The campaign criteria (6, 7, 8) run reduced-size campaigns and take tens
of minutes on one core.
"""

import json
import math
import re

import numpy as np
import pytest

from deepboed import cli
from deepboed.engine import (EngineConfig, PriorChain, Strategy, TrainConfig, XSource,
                             eig_scan, grid_posterior, run_campaign, train_posterior)
from deepboed.flow import DiagonalGaussian, init_flow
from deepboed.metrics import cumulative_info_gain, predictive_kl, realized_info_gain
from deepboed.models import (CavityArray, ConjugateGaussian, QubitChain, REFERENCE_CAVITY_J,
                             REFERENCE_CAVITY_OMEGA, REFERENCE_QUBIT_OMEGA, conjugate_mi, conjugate_posterior,
                             reference_cavity, reference_qubits)

from helpers import flow_grad_check, note, train_unconditional, trapezoid_grid
from test_metrics import gauss_kl, normal_quantile_points
from test_models import cavity_s_oracle, two_qubit_p_up_oracle

MI = 0.34657
SEEDS = (0, 1, 2)


# 1 --------------------------------------------------------------------------

def test_c01_bound_correctness():
    model = ConjugateGaussian()
    assert abs(conjugate_mi(model, 0.0) - MI) < 1e-5
    chain = PriorChain.for_model(model)
    flow = init_flow(1, 2, seed=0, loc=model.prior_mean, scale=model.prior_std)

    def checkpoint(it, f):
        c = eig_scan(chain, model, f, [0.0], 4096, np.random.default_rng(1000 + it))
        return it, float(c.eig[0]), float(c.stderr[0])

    res = train_posterior(chain, model, flow, TrainConfig(steps=2000, batch=512),
                          np.random.default_rng(0), x_source=XSource.fixed(0.0),
                          checkpoint_every=100, checkpoint_fn=checkpoint)
    final = eig_scan(chain, model, res.flow, [0.0], 20000, np.random.default_rng(99))
    eig, se = float(final.eig[0]), float(final.stderr[0])
    over = [(it, e, s) for it, e, s in res.checkpoints if e > MI + 3 * s]
    note(1, f"final EIG {eig:.4f} +- {se:.4f} vs {MI}; "
            f"{len(res.checkpoints)} checkpoints, {len(over)} above MI + 3 se")
    assert MI - 0.05 <= eig <= MI + 3 * se
    assert not over


# 2 --------------------------------------------------------------------------

def test_c02_quadrature_normalization():
    rng = np.random.default_rng(0)

    def banana(n):
        a = rng.normal(size=n)
        return np.stack([a, 0.5 * (a**2 - 1) + 0.5 * rng.normal(size=n)], axis=1)

    flow = train_unconditional(banana, dim=2, steps=800, batch=256, lr=3e-3, seed=0)
    mass, _, _ = trapezoid_grid(flow, np.zeros(flow.ctx_dim), 8.0, 401)
    note(2, f"trained 2-D mass {mass:.5f}")
    assert abs(mass - 1) < 1e-2


def test_c02_round_trip():
    flow = init_flow(3, 3, seed=5, head_std=0.3)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1000, 3))
    ctx = rng.uniform(-1, 1, size=(1000, 3))
    lam, _ = flow.forward_transform(z, ctx)
    back, _ = flow.inverse_transform(lam, ctx)
    err = float(np.max(np.abs(back - z)))
    note(2, f"round trip max error {err:.2e}")
    assert err < 1e-6


def test_c02_all_parameter_gradients():
    flow = init_flow(3, 3, seed=7, head_std=0.3)
    n = sum(p.size for p in flow.params.values())
    worst = flow_grad_check(flow, n_rows=6, per_tensor=None, seed=0)
    note(2, f"{n} gradient entries, worst rel. error {worst:.2e}")
    assert worst < 1e-3


# 3 --------------------------------------------------------------------------

def _sequential_vs_batch(model, grid, obs):
    batch = grid_posterior(model, grid, obs)
    seq = None
    for o in obs:
        seq = grid_posterior(model, grid, [o], None if seq is None else np.log(seq))
    return 0.5 * float(np.sum(np.abs(batch - seq)))


def test_c03_bayes_recursion():
    rng = np.random.default_rng(0)
    conj = ConjugateGaussian(noise_slope=0.5)
    obs = [(float(x), float(rng.normal())) for x in rng.uniform(-1, 1, 6)]
    tv_conj = _sequential_vs_batch(conj, np.linspace(-6, 6, 4001), obs)

    cav = reference_cavity(2)
    g = np.linspace(-3, 3, 61)
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    truth = np.array(cav.true_lambda)[None, :]
    obs = [(x, cav.simulate(truth, [x], rng)[0]) for x in (0.0, 1.5, -2.0, 0.7)]
    tv_cav = _sequential_vs_batch(cav, grid, obs)

    qub = reference_qubits(2)
    g = np.linspace(0.2, 1.8, 41)
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    truth = np.array(qub.true_lambda)[None, :]
    obs = [(t, qub.simulate(truth, [t], rng)[0]) for t in (0.5, 2.5, 4.0)]
    tv_qub = _sequential_vs_batch(qub, grid, obs)

    note(3, f"TV conjugate {tv_conj:.1e}, cavity {tv_cav:.1e}, qubit {tv_qub:.1e}")
    assert max(tv_conj, tv_cav, tv_qub) < 1e-10


# 4 --------------------------------------------------------------------------

def test_c04_cavity_physics():
    rng = np.random.default_rng(1)
    worst_flux = 0.0
    for _ in range(100):
        m = CavityArray(N=3, J=REFERENCE_CAVITY_J[:2], kappa_int=0.0, kappa_ext=0.5)
        lam = rng.normal(size=(1, 3))
        w = [float(rng.uniform(-12, 12))]
        flux = abs(m.reflection(lam, w)[0]) ** 2 + abs(m.response(lam, w)[0]) ** 2
        worst_flux = max(worst_flux, abs(flux - 1))

    single = CavityArray(N=1, J=(), kappa_int=0.0, kappa_ext=1.0)
    res_err = abs(single.response(np.array([[0.37]]), [0.37])[0] + 1.0)

    ref_model = reference_cavity(6)
    lam = np.array(REFERENCE_CAVITY_OMEGA)
    worst_oracle = 0.0
    for w in np.linspace(-12, 12, 25):
        ref = cavity_s_oracle(list(REFERENCE_CAVITY_OMEGA), list(REFERENCE_CAVITY_J), 0.5, 0.5, float(w))
        worst_oracle = max(worst_oracle, abs(ref_model.response(lam, [w])[0] - ref[0][5]))

    note(4, f"flux {worst_flux:.1e}, resonance {res_err:.1e}, oracle {worst_oracle:.1e}")
    assert worst_flux < 1e-10 and res_err < 1e-12 and worst_oracle < 1e-10


# 5 --------------------------------------------------------------------------

def test_c05_qubit_physics():
    m = reference_qubits(4)
    lam = np.array([REFERENCE_QUBIT_OMEGA, [1.0, 0.8, 1.2, 1.1]])
    energies, vectors, coeffs = m.spectrum(lam)
    norms = [np.linalg.norm(vectors[:, :, 0], axis=1), np.linalg.norm(coeffs, axis=1),
             np.linalg.norm(m.apply_pulse(vectors[:, :, 0]), axis=1)]
    for t in np.linspace(0, 5, 6):
        norms.append(np.linalg.norm(m.evolve((energies, vectors, coeffs), [t]), axis=1))
    norm_err = max(float(np.max(np.abs(n - 1))) for n in norms)

    t = np.linspace(0, 5, 21)
    free = QubitChain(N=3, J=0.0).p_up(np.repeat([[0.8, 1.1, 1.3]], 21, 0), t)
    free_err = float(np.max(np.abs(free - 1)))

    two = QubitChain(N=2, J=1.7)
    w = REFERENCE_QUBIT_OMEGA[:2]
    got = two.p_up(np.repeat([w], 21, 0), t)
    ref = np.array([two_qubit_p_up_oracle(w[0], w[1], 1.7, tt) for tt in t])
    expm_err = float(np.max(np.abs(got - ref)))

    p0 = float(m.p_up(np.array([REFERENCE_QUBIT_OMEGA]), [0.0])[0])
    note(5, f"norm {norm_err:.1e}, J=0 {free_err:.1e}, expm {expm_err:.1e}, p_up(0) {p0:.4f}")
    assert norm_err < 1e-10 and free_err < 1e-10 and expm_err < 1e-8 and p0 < 1


# 6 and 8: desk-scale cavity campaigns --------------------------------------------

CAVITY_STEPS = 15


@pytest.fixture(scope="module")
def cavity_runs():
    model = reference_cavity(3)
    cfg = EngineConfig(train=TrainConfig(steps=2000, batch=512))
    runs = {}
    for kind in ("active", "random"):
        for seed in SEEDS:
            runs[kind, seed] = run_campaign(model, Strategy(kind), CAVITY_STEPS, seed, cfg)
    return model, runs


@pytest.mark.slow
def test_c06_cavity_active_beats_random(cavity_runs):
    _, runs = cavity_runs
    finals = {k: float(cumulative_info_gain(r)[-1]) for k, r in runs.items()}
    wins = sum(finals["active", s] >= finals["random", s] for s in SEEDS)
    pairs = ", ".join(f"seed {s}: {finals['active', s]:.2f} vs {finals['random', s]:.2f}"
                      for s in SEEDS)
    note(6, f"active >= random in {wins}/3 ({pairs})")
    assert wins >= 2


@pytest.mark.slow
def test_c08_posterior_convergence(cavity_runs):
    model, runs = cavity_runs
    truth = np.array(model.true_lambda)
    ok_all = []
    for s in SEEDS:
        last = runs["active", s][-1]
        mean, std = np.array(last["posterior_mean"]), np.array(last["posterior_std"])
        inside = bool(np.all(np.abs(truth - mean) <= 3 * std))
        contracted = bool(np.all(std < 0.5 * model.prior_std))
        ok_all.append(inside and contracted)
        note(8, f"seed {s}: std {np.round(std, 3).tolist()}, "
                f"|z| {np.round(np.abs(truth - mean) / std, 2).tolist()}")
    # the criterion is stated for one run; seed 0 is that run, the others are reported
    assert ok_all[0]


# 7: desk-scale qubit campaigns --------------------------------------------------

QUBIT_STEPS = 20
QUBIT_THRESHOLD = 1.0  # nats; the full-scale threshold shrunk to the 2-qubit problem


@pytest.mark.slow
def test_c07_qubit_steps_to_threshold():
    model = reference_qubits(2)
    cfg = EngineConfig(train=TrainConfig(steps=1000, batch=256), grid_points=101,
                       refine_steps=1000)
    curves = {(kind, seed): cumulative_info_gain(run_campaign(model, Strategy(kind), QUBIT_STEPS,
                                                              seed, cfg))
              for kind in ("active", "random") for seed in SEEDS}

    def mean_steps(kind, threshold):
        hits = [cli.steps_to_threshold(curves[kind, s], threshold) for s in SEEDS]
        return float(np.mean([QUBIT_STEPS + 1 if k is None else k for k in hits]))

    mean = {k: mean_steps(k, QUBIT_THRESHOLD) for k in ("active", "random")}
    note(7, f"mean steps to {QUBIT_THRESHOLD} nats: active {mean['active']:.2f}, "
            f"random {mean['random']:.2f} (unreached counted as {QUBIT_STEPS + 1})")
    for t in (1.5, 2.0):  # reported only
        note(7, f"to {t} nats: active {mean_steps('active', t):.2f}, random {mean_steps('random', t):.2f}")
    assert mean["active"] < mean["random"]


# 9 --------------------------------------------------------------------------

def test_c09_realized_ig_oracle():
    model = ConjugateGaussian()
    m, s = conjugate_posterior(model, [(0.0, 1.3), (0.0, 0.4)])
    est = realized_info_gain(DiagonalGaussian([m], [s]), DiagonalGaussian([0.0], [1.0]), 20000,
                             np.random.default_rng(0))
    exact = gauss_kl(m, s, 0.0, 1.0)
    note(9, f"realized IG {est.value:.4f} +- {est.stderr:.4f} vs {exact:.4f}")
    assert abs(est.value - exact) < 3 * est.stderr


def test_c09_predictive_kl_oracle():
    model = ConjugateGaussian(noise_slope=0.5)
    m, s, truth, x = 0.4, 0.5, 0.9, 0.3
    est = predictive_kl(None, model, [truth], x, np.random.default_rng(1), n_outer=8192,
                        lam=normal_quantile_points(m, s, 4096))
    sd = float(model.noise_std(x))
    exact = gauss_kl(m, math.sqrt(s**2 + sd**2), truth, sd)
    note(9, f"predictive KL {est.value:.4f} +- {est.stderr:.4f} vs {exact:.4f}")
    assert abs(est.value - exact) < 3 * est.stderr


def test_c09_prefix_sums():
    vals = list(np.random.default_rng(2).normal(size=50))
    out = cumulative_info_gain(vals)
    acc, exact = 0.0, True
    for v, o in zip(vals, out):
        acc += v
        exact &= o == acc
    note(9, "cumulative series equals running sums exactly" if exact else "prefix sums differ")
    assert exact


# 10 -------------------------------------------------------------------------

_CLOCK = re.compile(r',?"wall_s":[^,}]*')


def test_c10_determinism(tmp_path):
    cfg = {"model": {"type": "cavity", "preset": "reference", "N": 2}, "steps": 2, "seeds": [3],
           "train": {"steps": 100, "batch": 64}, "grid_points": 25, "eig_batch": 32,
           "ig_samples": 256, "summary_samples": 512,
           "predictive": {"grid_points": 3, "n_mixture": 16, "n_outer": 32}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    logs = []
    for name in ("a", "b"):
        assert cli.cmd_run(str(path), str(tmp_path / name)) == 0
        raw = (tmp_path / name / "seed3" / "log.jsonl").read_bytes().decode()
        logs.append(_CLOCK.sub("", raw).encode())
    same = logs[0] == logs[1]
    note(10, f"{len(logs[0])} bytes per log, identical without wall_s: {same}")
    assert same and logs[0].count(b"\n") == 2
