"""Projection head: linear map -> layer norm -> l2 normalisation.

Identity mode skips the first two stages and only l2-normalises, so the
similarity of two projected clips is their cosine similarity.

Checkpoint layout (little-endian)::

    b"FPP1" | u32 input_dim | u32 output_dim | u8 mode |
    W (output_dim x input_dim, row-major) | g | beta     all float64

``mode`` is 0 for identity (no arrays follow), 1 for learned with affine
layer norm, 2 for learned without affine (g = 1 and beta = 0 are still
stored).
"""

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import Xoshiro256

MAGIC = b"FPP1"
LN_EPS = 1e-5
DEFAULT_DIM = 1152
DIM_PRESETS = (512, 1024, 1152, 2048)


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProjectionParams:
    mode: str = "identity"
    W: np.ndarray = None
    g: np.ndarray = None
    beta: np.ndarray = None
    eps: float = LN_EPS
    affine: bool = True

    def __post_init__(self):
        if self.mode not in ("identity", "learned"):
            raise ProjectionError(f"unknown projection mode {self.mode!r}")
        if self.mode == "learned":
            W = np.asarray(self.W, dtype=np.float64)
            if W.ndim != 2:
                raise ProjectionError("W must be a matrix")
            D = W.shape[0]
            g = np.ones(D) if self.g is None else np.asarray(self.g, dtype=np.float64)
            b = np.zeros(D) if self.beta is None else np.asarray(self.beta, dtype=np.float64)
            if g.shape != (D,) or b.shape != (D,):
                raise ProjectionError("g and beta must have length output_dim")
            for arr in (W, g, b):
                if not np.all(np.isfinite(arr)):
                    raise ProjectionError("non-finite projection parameter")
            object.__setattr__(self, "W", W)
            object.__setattr__(self, "g", g)
            object.__setattr__(self, "beta", b)

    @property
    def learned(self):
        return self.mode == "learned"

    @property
    def input_dim(self):
        return self.W.shape[1] if self.learned else None

    @property
    def output_dim(self):
        return self.W.shape[0] if self.learned else None

    def trainable(self):
        """Names of the parameter blocks that receive gradients."""
        if not self.learned:
            return ()
        return ("W", "g", "beta") if self.affine else ("W",)

    def with_arrays(self, **arrays):
        return replace(self, **arrays)

    def __eq__(self, other):
        if not isinstance(other, ProjectionParams):
            return NotImplemented
        if (self.mode, self.eps, self.affine) != (other.mode, other.eps, other.affine):
            return False
        if not self.learned:
            return True
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("W", "g", "beta"))


IDENTITY = ProjectionParams()


@dataclass
class ProjectionGrads:
    dW: np.ndarray = None
    dg: np.ndarray = None
    dbeta: np.ndarray = None


def init_projection(input_dim, output_dim, seed, eps=LN_EPS, affine=True):
    """Glorot-uniform W drawn row-major from the portable stream; g=1, beta=0."""
    if input_dim < 1 or output_dim < 1:
        raise ProjectionError("projection dims must be >= 1")
    a = math.sqrt(6.0 / (input_dim + output_dim))
    W = Xoshiro256(seed).uniform_array((output_dim, input_dim), -a, a)
    return ProjectionParams("learned", W, np.ones(output_dim), np.zeros(output_dim), eps, affine)


def project_forward(params, X):
    """Project rows of ``X`` (m, k); returns outputs and a cache for backward."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ProjectionError("expected a 2-d batch of vectors")
    if not np.all(np.isfinite(X)):
        raise ProjectionError("non-finite feature")
    if not params.learned:
        norms = np.sqrt(np.einsum("ik,ik->i", X, X))
        if np.any(norms == 0.0):
            raise ProjectionError("zero-norm feature")
        return X / norms[:, None], (X, norms)
    if X.shape[1] != params.input_dim:
        raise ProjectionError(f"dimension mismatch: projection expects {params.input_dim}, got {X.shape[1]}")
    Y = np.einsum("ik,Dk->iD", X, params.W)
    mu = Y.mean(axis=1, keepdims=True)
    centered = Y - mu
    sigma = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + params.eps)
    Yhat = centered / sigma
    Z = params.g * Yhat + params.beta if params.affine else Yhat
    znorm = np.sqrt(np.einsum("iD,iD->i", Z, Z))
    if np.any(znorm == 0.0):
        raise ProjectionError("zero-norm feature")
    out = Z / znorm[:, None]
    return out, (X, Yhat, sigma, znorm, out)


def project_batch(params, X):
    return project_forward(params, X)[0]


def project(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ProjectionError("expected a single vector")
    return project_forward(params, x[None, :])[0][0]


def project_backward_cached(params, cache, dout):
    """Return (ProjectionGrads, dX) given upstream gradient ``dout`` (m, D)."""
    if not params.learned:
        X, norms = cache
        out = X / norms[:, None]
        radial = np.einsum("iD,iD->i", out, dout)
        dX = (dout - out * radial[:, None]) / norms[:, None]
        return ProjectionGrads(), dX
    X, Yhat, sigma, znorm, out = cache
    radial = np.einsum("iD,iD->i", out, dout)
    dZ = (dout - out * radial[:, None]) / znorm[:, None]
    if params.affine:
        dg = (dZ * Yhat).sum(axis=0)
        dbeta = dZ.sum(axis=0)
        dYhat = dZ * params.g
    else:
        dg = np.zeros_like(params.g)
        dbeta = np.zeros_like(params.beta)
        dYhat = dZ
    dY = (
        dYhat
        - dYhat.mean(axis=1, keepdims=True)
        - Yhat * (dYhat * Yhat).mean(axis=1, keepdims=True)
    ) / sigma
    dW = dY.T @ X
    dX = dY @ params.W
    return ProjectionGrads(dW, dg, dbeta), dX


def project_batch_backward(params, X, dout):
    _, cache = project_forward(params, X)
    return project_backward_cached(params, cache, np.asarray(dout, dtype=np.float64))


def project_backward(params, x, upstream):
    """Gradients of ``upstream . project(params, x)`` w.r.t. params and ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grads, dX = project_batch_backward(params, x[None, :], np.asarray(upstream, dtype=np.float64)[None, :])
    return grads, dX[0]


def concat_tuple(fs, tuple_idx):
    """Concatenate the clips of ``fs`` named by ``tuple_idx`` in that order."""
    clips = fs.clips if hasattr(fs, "clips") else np.asarray(fs)
    idx = list(tuple_idx)
    if not idx:
        raise ProjectionError("tuple must contain at least one index")
    n = clips.shape[0]
    for i in idx:
        if not 0 <= i < n:
            raise ProjectionError(f"index out of range: {i} not in [0, {n})")
    return np.concatenate([np.asarray(clips[i], dtype=np.float64) for i in idx])


def tuple_features(clips, tuples):
    """Row ``t`` is the concatenation of ``clips[tuples[t]]``; shape (n', l*d)."""
    clips = np.asarray(clips, dtype=np.float64)
    idx = np.asarray(tuples, dtype=np.intp)
    if idx.ndim != 2:
        raise ProjectionError("tuples must be a (count, l) index array")
    if idx.size and (idx.min() < 0 or idx.max() >= clips.shape[0]):
        raise ProjectionError("index out of range")
    return clips[idx].reshape(idx.shape[0], -1)


def save_projection(params, path, extra=b""):
    with open(path, "wb") as fh:
        fh.write(encode_projection(params) + extra)


def encode_projection(params):
    if not params.learned:
        return MAGIC + struct.pack("<IIB", 0, 0, 0)
    mode = 1 if params.affine else 2
    return b"".join(
        [
            MAGIC,
            struct.pack("<IIB", params.input_dim, params.output_dim, mode),
            params.W.astype("<f8").tobytes(),
            params.g.astype("<f8").tobytes(),
            params.beta.astype("<f8").tobytes(),
        ]
    )


def decode_projection(data, eps=LN_EPS):
    """Return ``(params, bytes_consumed)``."""
    if data[:4] != MAGIC:
        raise ProjectionError("bad magic")
    if len(data) < 13:
        raise ProjectionError("truncated header")
    k, D, mode = struct.unpack("<IIB", data[4:13])
    if mode == 0:
        return ProjectionParams(eps=eps), 13
    if mode not in (1, 2):
        raise ProjectionError(f"unknown mode flag {mode}")
    need = 13 + 8 * (D * k + 2 * D)
    if len(data) < need:
        raise ProjectionError("truncated payload")
    flat = np.frombuffer(data, dtype="<f8", count=D * k + 2 * D, offset=13).astype(np.float64)
    W = flat[: D * k].reshape(D, k)
    g = flat[D * k: D * k + D]
    b = flat[D * k + D:]
    return ProjectionParams("learned", W, g, b, eps, mode == 1), need


def load_projection(path, eps=LN_EPS):
    with open(path, "rb") as fh:
        return decode_projection(fh.read(), eps)[0]
