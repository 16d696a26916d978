"""Brute-force reference computations.

Deliberately naive and independent of :mod:`fewmatch.matchers`: plain
Python loops over lists, exhaustive path enumeration, central differences.
"""


def chamfer_naive(M):
    """``(f_Q, f_S, f_QS)`` of a list-of-rows matrix by double loops."""
    rows, cols = len(M), len(M[0])
    q_total = 0.0
    for i in range(rows):
        best = M[i][0]
        for j in range(1, cols):
            if M[i][j] > best:
                best = M[i][j]
        q_total += best
    s_total = 0.0
    for j in range(cols):
        best = M[0][j]
        for i in range(1, rows):
            if M[i][j] > best:
                best = M[i][j]
        s_total += best
    f_q = q_total / rows
    f_s = s_total / cols
    return f_q, f_s, f_q + f_s


def monotone_paths(n, m):
    """Every path (0,0) -> (n-1,m-1) with unit steps right, down or diagonal."""
    out = []

    def walk(i, j, path):
        if (i, j) == (n - 1, m - 1):
            out.append(list(path))
            return
        for di, dj in ((0, 1), (1, 0), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                path.append((a, b))
                walk(a, b, path)
                path.pop()

    walk(0, 0, [(0, 0)])
    return out


def dtw_enumerate(M, paths=None):
    """Max over enumerated paths of (sum along the path) / (cells on the path).

    Sums accumulate from the first cell, as a left-to-right running total.
    """
    n, m = len(M), len(M[0])
    if paths is None:
        paths = monotone_paths(n, m)
    best = None
    for path in paths:
        s = 0.0
        for i, j in path:
            s += M[i][j]
        score = s / len(path)
        if best is None or score > best:
            best = score
    return best


def central_difference(f, x, step=1e-6):
    """Gradient of scalar ``f`` at the flat list ``x`` by central differences."""
    grad = []
    for i in range(len(x)):
        hi = list(x)
        lo = list(x)
        hi[i] += step
        lo[i] -= step
        grad.append((f(hi) - f(lo)) / (2 * step))
    return grad
