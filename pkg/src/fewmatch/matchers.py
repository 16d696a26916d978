"""Similarity matrices and matching functions f(M) -> scalar.

Every matcher accepts a single ``(rows, cols)`` matrix or a stack
``(..., rows, cols)`` and reduces the last two axes.  Order-free reductions
(mean, Chamfer sums) add sorted values, so permuting rows or columns of ``M``
leaves the result bit-identical.
"""

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .projection import project_batch, tuple_features

KINDS = ("mean", "max", "diag", "linear", "chamfer_q", "chamfer_s", "chamfer_qs", "dtw")
SQUARE_KINDS = ("diag", "linear", "dtw")
TEMPORAL_KINDS = ("diag", "linear", "dtw")
TUPLE_MODES = ("ordered", "all")
AGGREGATIONS = ("single_average", "joint")


class MatcherError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatcherSpec:
    kind: str = "chamfer_qs"
    tuple_len: int = 1
    tuple_mode: str = "ordered"
    aggregation: str = "single_average"
    dtw_gamma: float = 0.0
    linear_weights: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MatcherError(f"unknown matcher kind {self.kind!r}; choose from {KINDS}")
        if self.tuple_len < 1:
            raise MatcherError("tuple_len must be >= 1")
        if self.tuple_mode not in TUPLE_MODES:
            raise MatcherError(f"tuple_mode must be one of {TUPLE_MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise MatcherError(f"aggregation must be one of {AGGREGATIONS}")
        if not self.dtw_gamma >= 0:
            raise MatcherError("dtw_gamma must be >= 0")
        if self.linear_weights is not None:
            w = np.asarray(self.linear_weights, dtype=np.float64)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise MatcherError("linear_weights must be a square matrix")
            object.__setattr__(self, "linear_weights", w)

    @property
    def joint(self):
        return self.aggregation == "joint"

    def with_weights(self, weights):
        return replace(self, linear_weights=weights)

    def weights_for(self, size):
        """Linear weights for ``size x size`` matrices; 1/size**2 (the Mean matcher) if unset."""
        if self.linear_weights is None:
            return np.full((size, size), 1.0 / (size * size))
        if self.linear_weights.shape != (size, size):
            raise MatcherError(f"linear weights are {self.linear_weights.shape}, matrices are {size}x{size}")
        return self.linear_weights

    def describe(self):
        parts = [self.kind]
        if self.tuple_len > 1:
            parts.append(f"l{self.tuple_len}-{self.tuple_mode}")
        if self.joint:
            parts.append("joint")
        if self.kind == "dtw" and self.dtw_gamma > 0:
            parts.append(f"gamma{self.dtw_gamma:g}")
        return "+".join(parts)


def _check_matrix(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2 or M.shape[-1] == 0 or M.shape[-2] == 0:
        raise MatcherError("empty matrix")
    return M


def _check_square(M, what):
    if M.shape[-1] != M.shape[-2]:
        raise MatcherError(f"{what} requires a square matrix, got {M.shape[-2]}x{M.shape[-1]}")


def _sorted_sum(values):
    return np.sort(values, axis=-1).sum(axis=-1)


def similarity_matrix(q_feats, x_feats):
    """``m_ij = q_i . x_j`` for unit-norm rows; leading batch axes broadcast."""
    q = np.asarray(q_feats, dtype=np.float64)
    x = np.asarray(x_feats, dtype=np.float64)
    if q.ndim < 2 or x.ndim < 2 or q.shape[-2] == 0 or x.shape[-2] == 0:
        raise MatcherError("empty input")
    if q.shape[-1] != x.shape[-1]:
        raise MatcherError(f"dimension mismatch: {q.shape[-1]} vs {x.shape[-1]}")
    return np.einsum("...id,...jd->...ij", q, x)


def match_simple(kind, M):
    M = _check_matrix(M)
    if kind == "mean":
        return _sorted_sum(M.reshape(M.shape[:-2] + (-1,))) / (M.shape[-2] * M.shape[-1])
    if kind == "max":
        return M.max(axis=(-2, -1))
    if kind == "diag":
        _check_square(M, "diag")
        return np.trace(M, axis1=-2, axis2=-1) / M.shape[-1]
    raise MatcherError(f"not a simple matcher: {kind!r}")


def match_chamfer(variant, M):
    """Query-side (Q), support-side (S) or symmetric (QS) Chamfer similarity.

    Each side normalises by its own length, so the same call works on joint
    matrices with more columns than rows.
    """
    M = _check_matrix(M)
    variant = variant.upper()
    if variant not in ("Q", "S", "QS"):
        raise MatcherError(f"unknown Chamfer variant {variant!r}")
    total = 0.0
    if "Q" in variant:
        total = total + _sorted_sum(M.max(axis=-1)) / M.shape[-2]
    if "S" in variant:
        total = total + _sorted_sum(M.max(axis=-2)) / M.shape[-1]
    return total


def match_linear(W, M):
    M = _check_matrix(M)
    W = np.asarray(W, dtype=np.float64)
    _check_square(M, "linear")
    if W.shape != M.shape[-2:]:
        raise MatcherError(f"shape mismatch: weights {W.shape} vs matrix {M.shape[-2:]}")
    return (W * M).sum(axis=(-2, -1))


def _smax(stack, gamma):
    """Smooth max over axis 0 and its softmax weights; -inf entries get weight 0."""
    mx = stack.max(axis=0)
    finite = np.isfinite(mx)
    shift = np.where(finite, mx, 0.0)
    e = np.exp((stack - shift) / gamma)
    s = e.sum(axis=0)
    s_safe = np.where(finite, s, 1.0)
    value = np.where(finite, shift + gamma * np.log(s_safe), -np.inf)
    weights = np.where(finite, e / s_safe, 0.0)
    return value, weights


def _predecessors(i, j):
    out = []
    if i > 0:
        out.append((i - 1, j))
    if j > 0:
        out.append((i, j - 1))
    if i > 0 and j > 0:
        out.append((i - 1, j - 1))
    return out


def _dtw_forward(M, gamma):
    """Length-stratified DP: ``R[i][j][b, L]`` is the best (or smoothed) sum of
    a monotone path (0,0)->(i,j) visiting exactly ``L`` cells."""
    B, n, m = M.shape
    Lmax = n + m - 1
    R = [[None] * m for _ in range(n)]
    weights = {}
    first = np.full((B, Lmax + 1), -np.inf)
    first[:, 1] = M[:, 0, 0]
    R[0][0] = first
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            preds = _predecessors(i, j)
            stack = np.stack([R[a][b][:, :-1] for a, b in preds])
            if gamma > 0:
                best, w = _smax(stack, gamma)
                weights[i, j] = w
            else:
                best = stack.max(axis=0)
            cell = np.full((B, Lmax + 1), -np.inf)
            cell[:, 1:] = best + M[:, i, j][:, None]
            R[i][j] = cell
    return R, weights


def _dtw_final(R_end, gamma):
    Lmax = R_end.shape[1] - 1
    lengths = np.arange(1, Lmax + 1, dtype=np.float64)
    scores = R_end[:, 1:] / lengths
    if gamma > 0:
        value, w = _smax(scores.T, gamma)
        return value, w.T / lengths
    return scores.max(axis=1), None


def match_dtw(M, gamma=0.0):
    """Best monotone alignment path from the first to the last cell, scored by
    the mean similarity along the path.

    ``gamma == 0`` gives the exact maximum over all paths; ``gamma > 0``
    replaces every max by ``gamma * logsumexp(. / gamma)`` (an upper bound
    that tends to the exact value as gamma -> 0).
    """
    M = _check_matrix(M)
    _check_square(M, "dtw")
    if not gamma >= 0:
        raise MatcherError("gamma must be >= 0")
    lead = M.shape[:-2]
    flat = M.reshape((-1,) + M.shape[-2:])
    R, _ = _dtw_forward(flat, gamma)
    value, _ = _dtw_final(R[-1][-1], gamma)
    return value.reshape(lead) if lead else float(value[0])


def _dtw_backward(M, gamma):
    """Value and d value / d M of soft DTW for a stack ``(B, n, n)``."""
    B, n, m = M.shape
    R, weights = _dtw_forward(M, gamma)
    value, d_end = _dtw_final(R[-1][-1], gamma)
    G = [[np.zeros((B, n + m)) for _ in range(m)] for _ in range(n)]
    G[n - 1][m - 1][:, 1:] = d_end
    dM = np.zeros_like(M)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            g = G[i][j][:, 1:]
            dM[:, i, j] = g.sum(axis=1)
            if i == 0 and j == 0:
                continue
            w = weights[i, j]
            for p, (a, b) in enumerate(_predecessors(i, j)):
                G[a][b][:, :-1] += w[p] * g
    return value, dM


def enumerate_tuples(n, l, mode="ordered"):
    """Clip-index tuples in lexicographic order: C(n, l) increasing
    combinations (``ordered``) or n!/(n-l)! arrangements (``all``)."""
    if l < 1:
        raise MatcherError("tuple length must be >= 1")
    if l > n:
        raise MatcherError(f"tuple length {l} exceeds clip count {n}")
    if mode == "ordered":
        return list(itertools.combinations(range(n), l))
    if mode == "all":
        return list(itertools.permutations(range(n), l))
    raise MatcherError(f"tuple_mode must be one of {TUPLE_MODES}")


def tuple_count(n, l, mode="ordered"):
    return math.comb(n, l) if mode == "ordered" else math.perm(n, l)


def joint_matrix(mats):
    """Concatenate per-shot matrices horizontally (support-index order)."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise MatcherError("joint matrix needs at least one matrix")
    rows = {m.shape[-2] for m in mats}
    if len(rows) != 1:
        raise MatcherError(f"row-count mismatch: {sorted(rows)}")
    return np.concatenate(mats, axis=-1)


def stack_to_joint(M):
    """``(..., k, r, c)`` per-shot stack -> ``(..., r, k*c)`` joint matrices."""
    k, r, c = M.shape[-3:]
    moved = np.moveaxis(M, -3, -2)
    return moved.reshape(M.shape[:-3] + (r, k * c))


def joint_to_stack(J, k):
    r, kc = J.shape[-2:]
    c = kc // k
    return np.moveaxis(J.reshape(J.shape[:-2] + (r, k, c)), -2, -3)


def tuple_similarity_matrix(q, x, params, l=1, mode="ordered"):
    """Similarity of projected clip tuples of two FeatureSets."""
    if q.n != x.n:
        raise MatcherError("feature sets must have the same clip count")
    tuples = enumerate_tuples(q.n, l, mode)
    fq = project_batch(params, tuple_features(q.clips, tuples))
    fx = project_batch(params, tuple_features(x.clips, tuples))
    return similarity_matrix(fq, fx)


def apply_matcher(spec, M):
    """Evaluate ``spec`` on a matrix or a stack of matrices."""
    M = _check_matrix(M)
    kind = spec.kind
    if kind in ("mean", "max", "diag"):
        return match_simple(kind, M)
    if kind.startswith("chamfer_"):
        return match_chamfer(kind.split("_", 1)[1], M)
    if kind == "linear":
        _check_square(M, "linear")
        return match_linear(spec.weights_for(M.shape[-1]), M)
    return match_dtw(M, spec.dtw_gamma)


def _one_hot_argmax(M, axis):
    idx = np.argmax(M, axis=axis)
    out = np.zeros_like(M)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    return out


def matcher_backward(spec, M, upstream):
    """Values, ``d(sum upstream*f)/dM`` and the gradient of the Linear weights.

    Max-type reductions route the gradient to the first maximising cell, so
    the result is the exact gradient wherever the maximiser is unique.
    """
    M = _check_matrix(M)
    upstream = np.asarray(upstream, dtype=np.float64)
    kind = spec.kind
    r, c = M.shape[-2:]
    dW = None
    if kind == "mean":
        local = np.full(M.shape, 1.0 / (r * c))
    elif kind == "max":
        flat = M.reshape(M.shape[:-2] + (r * c,))
        local = _one_hot_argmax(flat, -1).reshape(M.shape)
    elif kind == "diag":
        _check_square(M, "diag")
        local = np.broadcast_to(np.eye(r) / r, M.shape).copy()
    elif kind == "linear":
        W = spec.weights_for(c)
        _check_square(M, "linear")
        local = np.broadcast_to(W, M.shape).copy()
        dW = (upstream[..., None, None] * M).reshape((-1, r, c)).sum(axis=0)
    elif kind.startswith("chamfer_"):
        variant = kind.split("_", 1)[1].upper()
        local = np.zeros(M.shape)
        if "Q" in variant:
            local += _one_hot_argmax(M, -1) / r
        if "S" in variant:
            local += _one_hot_argmax(M, -2) / c
    elif kind == "dtw":
        _check_square(M, "dtw")
        if spec.dtw_gamma <= 0:
            raise MatcherError("hard DTW (gamma = 0) is not differentiable; use gamma > 0 for training")
        flat = M.reshape((-1, r, c))
        values, local = _dtw_backward(flat, spec.dtw_gamma)
        values = values.reshape(M.shape[:-2])
        local = local.reshape(M.shape)
        return values, upstream[..., None, None] * local, dW
    else:
        raise MatcherError(f"unknown kind {kind!r}")
    return apply_matcher(spec, M), upstream[..., None, None] * local, dW


def _top_two_gap(values, axis):
    if values.shape[axis] < 2:
        return np.inf
    part = -np.partition(-values, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    return float(np.min(top - second))


def tie_margin(kind, M):
    """Smallest gap between the two largest candidates of any max the matcher
    takes; ``inf`` for matchers without a max."""
    M = np.asarray(M, dtype=np.float64)
    if kind == "max":
        return _top_two_gap(M.reshape(M.shape[:-2] + (-1,)), -1)
    if kind.startswith("chamfer_"):
        variant = kind.split("_", 1)[1].upper()
        gaps = [np.inf]
        if "Q" in variant:
            gaps.append(_top_two_gap(M, -1))
        if "S" in variant:
            gaps.append(_top_two_gap(M, -2))
        return min(gaps)
    return np.inf


def row_argmax(M):
    """Per-row best column (first one on ties) and its value."""
    M = _check_matrix(M)
    idx = np.argmax(M, axis=-1)
    return idx, np.take_along_axis(M, idx[..., None], axis=-1)[..., 0]
