"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and conventions. The QR loop runs over columns with the
whole stack vectorised; the eigensolver is a round-robin parallel Jacobi
that rotates n/2 disjoint index pairs of every matrix at once.
"""
import numpy as np


def qr_batch(x):
    x = np.array(x, dtype=np.float64, copy=True)
    nb, m, n = x.shape
    hv = np.zeros((nb, m, n))
    beta = np.zeros((nb, n))
    a = x
    for j in range(n):
        col = a[:, j:, j]
        norm = np.sqrt(np.einsum("bi,bi->b", col, col))
        alpha = -np.copysign(norm, col[:, 0])
        v = col.copy()
        v[:, 0] -= alpha
        vv = np.einsum("bi,bi->b", v, v)
        live = norm > 0.0
        beta[:, j] = np.where(live, 2.0 / np.where(live, vv, 1.0), 0.0)
        v[~live] = 0.0
        hv[:, j:, j] = v
        s = np.einsum("bi,bic->bc", v, a[:, j:, j:]) * beta[:, j, None]
        a[:, j:, j:] -= v[:, :, None] * s[:, None, :]
        a[live, j, j] = alpha[live]
        a[live, j + 1:, j] = 0.0

    r = np.triu(a[:, :n, :n])
    q = np.zeros((nb, m, n))
    q[:, np.arange(n), np.arange(n)] = 1.0
    for j in range(n - 1, -1, -1):
        v = hv[:, j:, j]
        s = np.einsum("bi,bic->bc", v, q[:, j:, j:]) * beta[:, j, None]
        q[:, j:, j:] -= v[:, :, None] * s[:, None, :]

    sign = np.where(np.diagonal(r, axis1=1, axis2=2) < 0.0, -1.0, 1.0)
    r *= sign[:, :, None]
    q *= sign[:, None, :]
    d = np.abs(np.diagonal(r, axis1=1, axis2=2))
    hi = d.max(axis=1)
    ratio = np.where(hi > 0.0, d.min(axis=1) / np.where(hi > 0.0, hi, 1.0), 0.0)
    return q, r, ratio


def _round_robin(n):
    """Rounds of disjoint (p, q) pairs covering every pair exactly once."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            rounds.append(np.array(pairs, dtype=np.intp).T)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def eigh_batch(a, tol=1e-12, max_sweeps=100):
    a = np.array(a, dtype=np.float64, copy=True)
    nb, n, _ = a.shape
    v = np.broadcast_to(np.eye(n), (nb, n, n)).copy()
    sweeps = np.full(nb, -1, dtype=np.intc)
    rounds = _round_robin(n)
    iu = np.triu_indices(n, 1)
    active = np.ones(nb, dtype=bool)

    for sweep in range(max_sweeps + 1):
        off = np.sqrt(2.0 * np.sum(a[:, iu[0], iu[1]] ** 2, axis=1))
        on = np.sqrt(np.sum(np.diagonal(a, axis1=1, axis2=2) ** 2, axis=1))
        done = active & (off <= tol * on)
        sweeps[done] = sweep
        active &= ~done
        if not active.any() or sweep == max_sweeps:
            break
        for p, q in rounds:
            apq = a[:, p, q]
            rot = active[:, None] & (apq != 0.0)
            safe = np.where(rot, apq, 1.0)
            tau = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            big = np.abs(tau) > 1e150
            tau_c = np.where(big, 1.0, tau)
            t = np.where(
                big,
                0.5 / np.where(big, tau, 1.0),
                np.copysign(1.0, tau_c) / (np.abs(tau_c) + np.sqrt(1.0 + tau_c * tau_c)),
            )
            c = np.where(rot, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rot, t * c, 0.0)

            cp, sp = c[:, None, :], s[:, None, :]
            x, y = a[:, :, p], a[:, :, q]
            a[:, :, p], a[:, :, q] = cp * x - sp * y, sp * x + cp * y
            x, y = a[:, p, :], a[:, q, :]
            a[:, p, :], a[:, q, :] = c[:, :, None] * x - s[:, :, None] * y, s[:, :, None] * x + c[:, :, None] * y
            a[:, p, q] = np.where(rot, 0.0, a[:, p, q])
            a[:, q, p] = np.where(rot, 0.0, a[:, q, p])
            x, y = v[:, :, p], v[:, :, q]
            v[:, :, p], v[:, :, q] = cp * x - sp * y, sp * x + cp * y

    w = np.diagonal(a, axis1=1, axis2=2).copy()
    return w, v, sweeps
