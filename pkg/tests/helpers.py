"""Independent oracles and small utilities shared by the test modules."""

import numpy as np

from deepboed import autodiff as ad
from deepboed.flow import init_flow


def trapezoid_grid(flow, ctx, half_width, n):
    """Mass, mean and covariance of a 2-D flow density by trapezoid quadrature."""
    x = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    dens = np.exp(flow.log_prob(pts, ctx)).reshape(n, n)

    def integrate(f):
        return np.trapezoid(np.trapezoid(f, x, axis=1), x)

    mass = integrate(dens)
    mean = np.array([integrate(dens * X), integrate(dens * Y)]) / mass
    dx, dy = X - mean[0], Y - mean[1]
    cov = np.array([[integrate(dens * dx * dx), integrate(dens * dx * dy)],
                    [integrate(dens * dx * dy), integrate(dens * dy * dy)]]) / mass
    return mass, mean, cov


def train_unconditional(sampler, dim, steps, batch, lr, seed):
    """Maximum-likelihood fit of a flow (with a constant context) to samples."""
    flow = init_flow(dim, 1, seed=seed)
    g = ad.Graph()
    params = {k: g.input(k) for k in sorted(flow.params)}
    out = -g.mean(flow.graph_log_prob(g, g.input("lam"), g.input("ctx"), params))
    state = ad.AdamState(lr=lr)
    ctx = np.zeros((batch, 1))
    p = flow.params
    for _ in range(steps):
        ad.forward(g, {**p, "lam": sampler(batch), "ctx": ctx}, out)
        grads = ad.backward(g)
        p, state = ad.adam_step(p, {k: grads[k] for k in p}, state)
    return flow.with_params(p)


def flow_grad_check(flow, n_rows, per_tensor, seed, h=1e-6):
    """Worst relative error between graph gradients and central differences.

    ``per_tensor=None`` checks every parameter entry.
    """
    rng = np.random.default_rng(seed)
    lam = rng.normal(size=(n_rows, flow.dim))
    ctx = rng.uniform(-1, 1, size=(n_rows, flow.ctx_dim))
    g = ad.Graph()
    params = {k: g.input(k) for k in sorted(flow.params)}
    out = g.mean(flow.graph_log_prob(g, g.input("lam"), g.input("ctx"), params))
    ad.forward(g, {**flow.params, "lam": lam, "ctx": ctx}, out)
    grads = ad.backward(g)

    def objective(name, idx, delta):
        p = dict(flow.params)
        arr = p[name].copy()
        arr[idx] += delta
        p[name] = arr
        return float(np.mean(flow.with_params(p).log_prob(lam, ctx)))

    worst = 0.0
    for name, arr in sorted(flow.params.items()):
        all_idx = list(np.ndindex(arr.shape))
        if per_tensor is not None and len(all_idx) > per_tensor:
            pick = rng.choice(len(all_idx), size=per_tensor, replace=False)
            all_idx = [all_idx[i] for i in pick]
        for idx in all_idx:
            fd = (objective(name, idx, h) - objective(name, idx, -h)) / (2 * h)
            an = grads[name][idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-5)
            worst = max(worst, err)
    return worst


# acceptance bookkeeping: criterion number -> detail strings, filled by the
# acceptance tests and printed by the terminal-summary hook in conftest.py
ACCEPTANCE_DETAIL: dict[int, list[str]] = {}


def note(criterion: int, text: str) -> None:
    ACCEPTANCE_DETAIL.setdefault(criterion, []).append(text)
    print(f"[criterion {criterion}] {text}")
