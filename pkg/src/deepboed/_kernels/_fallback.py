"""Pure numpy implementations of the simulator kernels."""

import numpy as np


def tridiag_columns(omega, coupling, kappa, w):
    """First and last columns of ``G = A^-1`` for the cavity resolvent.

    ``A = -i (w - Omega) + diag(kappa) / 2`` with ``Omega`` real symmetric
    tridiagonal (diagonal ``omega[b]``, off-diagonal ``coupling``). Solved by
    the Thomas algorithm vectorised over the batch.

    omega: (B, N) float, coupling: (N-1,) float, kappa: (N,) float, w: (B,)
    Returns two (B, N) complex arrays.
    """
    omega = np.asarray(omega, dtype=np.float64)
    B, N = omega.shape
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (B,))
    diag = -1j * (w[:, None] - omega) + 0.5 * np.asarray(kappa)[None, :]
    off = 1j * np.asarray(coupling, dtype=np.float64)
    first = _thomas(diag, off, 0)
    last = _thomas(diag, off, N - 1)
    return first, last


def _thomas(diag, off, k):
    B, N = diag.shape
    cp = np.zeros((B, N), dtype=np.complex128)
    dp = np.zeros((B, N), dtype=np.complex128)
    rhs = np.zeros(N)
    rhs[k] = 1.0
    denom = diag[:, 0]
    if N > 1:
        cp[:, 0] = off[0] / denom
    dp[:, 0] = rhs[0] / denom
    for i in range(1, N):
        denom = diag[:, i] - off[i - 1] * cp[:, i - 1]
        if i < N - 1:
            cp[:, i] = off[i] / denom
        dp[:, i] = (rhs[i] - off[i - 1] * dp[:, i - 1]) / denom
    x = np.empty((B, N), dtype=np.complex128)
    x[:, N - 1] = dp[:, N - 1]
    for i in range(N - 2, -1, -1):
        x[:, i] = dp[:, i] - cp[:, i] * x[:, i + 1]
    return x


def sym_eigh(h):
    """Ascending eigenpairs of a batch of real symmetric matrices (B, d, d)."""
    return np.linalg.eigh(np.asarray(h, dtype=np.float64))
