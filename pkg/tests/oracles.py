"""Straightforward scalar reimplementations used as independent test oracles.

Nothing here imports the package; loops over Python floats only.
"""

import math


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def affinity(X, Y, tau):
    n, m = len(X), len(Y)
    L = [[-dist(X[i], Y[j]) / tau for j in range(m)] for i in range(n)]
    row = [[0.0] * m for _ in range(n)]
    for i in range(n):
        top = max(L[i])
        e = [math.exp(L[i][j] - top) for j in range(m)]
        s = sum(e)
        for j in range(m):
            row[i][j] = e[j] / s
    col = [[0.0] * m for _ in range(n)]
    for j in range(m):
        top = max(L[i][j] for i in range(n))
        e = [math.exp(L[i][j] - top) for i in range(n)]
        s = sum(e)
        for i in range(n):
            col[i][j] = e[i] / s
    return [[math.sqrt(row[i][j] * col[i][j]) for j in range(m)] for i in range(n)]


def field(X, Y, tau):
    """Attraction to Y minus repulsion from X (self-pair included), cross-scaled weights."""
    Ap = affinity(X, Y, tau)
    An = affinity(X, X, tau)
    D = len(X[0])
    out = []
    for i in range(len(X)):
        sp, sn = sum(Ap[i]), sum(An[i])
        z = sp + sn
        v = [0.0] * D
        for j, y in enumerate(Y):
            w = Ap[i][j] * sn / z
            for d in range(D):
                v[d] += w * y[d]
        for k, x in enumerate(X):
            w = An[i][k] * sp / z
            for d in range(D):
                v[d] -= w * x[d]
        out.append(v)
    return out


def scale(X, Y):
    pool = list(X) + list(Y)
    D = len(pool[0])
    ds = [dist(pool[a], pool[b]) for a in range(len(pool)) for b in range(a + 1, len(pool))]
    return math.sqrt(D) / (sum(ds) / len(ds))


def total_field(X, Y, temps):
    s = scale(X, Y)
    Xs = [[s * v for v in x] for x in X]
    Ys = [[s * v for v in y] for y in Y]
    D = len(X[0])
    total = [[0.0] * D for _ in X]
    for tau in temps:
        v = field(Xs, Ys, tau)
        lam = math.sqrt(sum(sum(c * c for c in row) for row in v) / len(v) / D)
        lam = max(lam, 1e-12)
        for i in range(len(X)):
            for d in range(D):
                total[i][d] += v[i][d] / lam
    return [[c / s for c in row] for row in total]
