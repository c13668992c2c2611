"""Brute-force reference implementations: explicit loops, no vectorised shortcuts."""

from __future__ import annotations

import math


def _rows(p):
    return [[float(v) for v in row] for row in p]


def _dist(u, v):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _cos(u, v):
    return _dot(u, v) / (math.sqrt(_dot(u, u)) * math.sqrt(_dot(v, v)))


def e_concat(p1, p2):
    a = [x for row in _rows(p1) for x in row]
    b = [x for row in _rows(p2) for x in row]
    return 1.0 / (1.0 + _dist(a, b))


def e_average(p1, p2):
    a, b = _rows(p1), _rows(p2)
    total = 0.0
    for u in a:
        for v in b:
            total += _dist(u, v)
    return 1.0 / (1.0 + total / (len(a) * len(b)))


def c_concat(p1, p2):
    return _cos([x for row in _rows(p1) for x in row], [x for row in _rows(p2) for x in row])


def c_average(p1, p2):
    a, b = _rows(p1), _rows(p2)
    total = 0.0
    for u in a:
        for v in b:
            total += _cos(u, v)
    return total / (len(a) * len(b))


def on_metric(s1, s2):
    A = {i for i, v in enumerate(s1) if v}
    B = {i for i, v in enumerate(s2) if v}
    return len(A & B) / math.sqrt(len(A) * len(B))


def on_intersection(side_a, side_b):
    def inter(states):
        return [int(all(s[i] for s in states)) for i in range(len(states[0]))]

    return on_metric(inter(side_a), inter(side_b))


def fractional_ranks(x):
    """Sort, then give each run of equal values the mean of its 1-based positions."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        mean_rank = (i + 1 + j + 1) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(a, b):
    ra, rb = fractional_ranks(a), fractional_ranks(b)
    n = len(ra)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)
