"""Straight-line re-implementations used as test oracles.

Plain Python loops over numpy scalars, no shared code with the package. Each
function transcribes one computation step by step so that a disagreement with
the vectorized, taped implementation points at a real bug.
"""

import math

import numpy as np


def squash(z):
    z = [float(v) for v in z]
    sq = sum(v * v for v in z)
    if sq == 0.0:
        return np.zeros(len(z))
    n = math.sqrt(sq)
    return np.array([sq / (1.0 + sq) * v / n for v in z])


def routing(votes, R):
    """Dynamic routing, one iteration at a time.

    votes[i][j] is the vote of part i for whole j. Returns the per-iteration
    record of logits b (before the softmax), weights c, poses u and the
    updated logits.
    """
    votes = np.asarray(votes, dtype=float)
    n_parts, n_wholes, dim = votes.shape
    b = [[0.0] * n_wholes for _ in range(n_parts)]
    record = []
    for _ in range(R):
        b_in = [row[:] for row in b]
        c = []
        for i in range(n_parts):
            top = max(b[i])
            e = [math.exp(b[i][j] - top) for j in range(n_wholes)]
            total = sum(e)
            c.append([v / total for v in e])
        u = []
        for j in range(n_wholes):
            s = [0.0] * dim
            for i in range(n_parts):
                for k in range(dim):
                    s[k] += c[i][j] * votes[i, j, k]
            u.append(squash(s))
        for i in range(n_parts):
            for j in range(n_wholes):
                b[i][j] += sum(votes[i, j, k] * u[j][k] for k in range(dim))
        record.append({"b": b_in, "c": c, "u": [list(v) for v in u],
                       "b_next": [row[:] for row in b]})
    return record


def routing_with_sum(votes, R):
    """Final poses, weights and the final pre-squash sums."""
    votes = np.asarray(votes, dtype=float)
    n_parts, n_wholes, dim = votes.shape
    rec = routing(votes, R)
    c = np.array(rec[-1]["c"])
    s = np.zeros((n_wholes, dim))
    for j in range(n_wholes):
        for i in range(n_parts):
            s[j] += c[i, j] * votes[i, j]
    return np.array(rec[-1]["u"]), c, s


def gcn_normalize(A):
    n = len(A)
    M = [[float(A[i][j]) + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(M[i]) for i in range(n)]
    return np.array([[M[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)]
                     for i in range(n)])


def matmul(A, B):
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            out[i, j] = sum(A[i, k] * B[k, j] for k in range(A.shape[1]))
    return out


def gcn_layer(poses, A, W):
    """tanh(D^-1/2 (A+I) D^-1/2 u W), entry by entry."""
    Z = matmul(matmul(gcn_normalize(A), poses), W)
    return np.array([[math.tanh(v) for v in row] for row in Z])


def disentangle(X, Ws, bs):
    """Factor blocks tanh(X W_k) + b_k, concatenated."""
    rows = []
    for i in range(len(X)):
        row = []
        for W, b in zip(Ws, bs):
            proj = matmul(np.asarray(X)[i:i + 1], W)[0]
            row += [math.tanh(v) + bb for v, bb in zip(proj, b)]
        rows.append(row)
    return np.array(rows)


def coarsen(A, C):
    return matmul(matmul(np.asarray(C).T, A), C)


def residual(next_sum, prev):
    prev = np.asarray(prev, dtype=float)
    ga = [sum(prev[i, k] for i in range(len(prev))) / len(prev) for k in range(prev.shape[1])]
    return np.array([squash([v + g for v, g in zip(row, ga)]) for row in next_sum])


def forward(X, A, arrays, K, hidden, residual_on=True, R=3):
    """Class capsules for a graph, given the raw parameter arrays by name."""
    Ws = [arrays[f"disentangle.W{k}"] for k in range(K)]
    bs = [arrays[f"disentangle.b{k}"] for k in range(K)]
    u = np.array([squash(row) for row in disentangle(X, Ws, bs)])
    primary = u
    A = np.asarray(A, dtype=float)
    for layer, n_next in enumerate(hidden, start=1):
        votes = np.stack([gcn_layer(u, A, arrays[f"tgnn{layer}.W{j}"])
                          for j in range(n_next)], axis=1)
        u_next, c, s = routing_with_sum(votes, R)
        A = coarsen(A, c)
        u = residual(s, u) if residual_on else u_next
    return u, primary


def margin(class_caps, label, m_plus=0.9, m_minus=0.1, lam=0.5):
    total = 0.0
    for k, cap in enumerate(class_caps):
        n = math.sqrt(sum(float(v) ** 2 for v in cap))
        if k == label:
            total += max(0.0, m_plus - n) ** 2
        else:
            total += lam * max(0.0, n - m_minus) ** 2
    return total


def masked_embed(primary, class_caps, label, Wr, br):
    flat = []
    for k, cap in enumerate(class_caps):
        flat += [float(v) if k == label else 0.0 for v in cap]
    corr = matmul(np.array([flat]), Wr)[0] + np.asarray(br)
    return np.array([[p + c for p, c in zip(row, corr)] for row in primary])


def reconstruction(A, Z, clamp=1e-7):
    n = len(Z)
    total = 0.0
    for j in range(n):
        for k in range(n):
            logit = sum(float(a) * float(b) for a, b in zip(Z[j], Z[k]))
            p = 1.0 / (1.0 + math.exp(-logit))
            p = min(max(p, clamp), 1.0 - clamp)
            total += A[j][k] * math.log(p) + (1 - A[j][k]) * math.log(1 - p)
    return -total / (n * n)


def adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Run Adam over a sequence of gradients for one flat parameter vector."""
    theta = [float(v) for v in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return np.array(theta)
