"""Episodic training of the projection head (and Linear matcher weights).

Loss per episode: mean over queries of ``-log softmax(tau * S)[true]`` where
``S`` are the class scores.  ``tau = exp(log_tau)`` so it stays positive.
Gradients are accumulated by hand: softmax -> matcher -> similarity ->
projection.  Plain SGD, constant learning rate, early stopping on a fixed
set of validation episodes.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .features import DataError, build_fixed_test_episodes, sample_episode
from .matchers import (
    MatcherError,
    enumerate_tuples,
    joint_to_stack,
    matcher_backward,
    stack_to_joint,
    tie_margin,
)
from .projection import (
    IDENTITY,
    ProjectionError,
    decode_projection,
    encode_projection,
    init_projection,
    project_backward_cached,
    project_forward,
    tuple_features,
)
from .rng import Xoshiro256
from .scoring import check_spec_for_episode, class_scores_from_matrices, evaluate

DEFAULT_TAU = 10.0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    tau_init: float = DEFAULT_TAU
    episodes_per_epoch: int = 200
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    way: int = 5
    shot: int = 1
    queries: int = 1
    val_episodes: int = 200
    val_seed: int = 1
    projection: str = "learned"
    projection_dim: int = 1152
    ln_eps: float = 1e-5
    ln_affine: bool = True

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.tau_init > 0:
            raise ValueError("tau_init must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.projection not in ("learned", "identity"):
            raise ValueError("projection must be 'learned' or 'identity'")


@dataclass
class TrainState:
    params: object = IDENTITY
    log_tau: float = math.log(DEFAULT_TAU)
    linear_weights: np.ndarray = None
    epoch: int = 0
    best_val: float = -1.0
    best_epoch: int = 0
    rng_state: tuple = None

    @property
    def tau(self):
        return math.exp(self.log_tau)

    def spec_for(self, spec):
        if spec.kind == "linear" and self.linear_weights is not None:
            return spec.with_weights(self.linear_weights)
        return spec

    def blocks(self):
        """Trainable blocks by name, in a fixed order."""
        out = {name: getattr(self.params, name) for name in self.params.trainable()}
        out["tau"] = np.array([self.log_tau])
        if self.linear_weights is not None:
            out["linear_weights"] = self.linear_weights
        return out

    def with_blocks(self, blocks):
        arrays = {k: np.asarray(blocks[k], dtype=np.float64) for k in self.params.trainable()}
        params = self.params.with_arrays(**arrays) if arrays else self.params
        lw = blocks.get("linear_weights", self.linear_weights)
        return replace(self, params=params, log_tau=float(np.asarray(blocks["tau"]).reshape(-1)[0]),
                       linear_weights=None if lw is None else np.asarray(lw, dtype=np.float64))


def initial_state(spec, config, n, d):
    """Fresh state for clip count ``n`` and feature dim ``d``."""
    if config.projection == "learned":
        params = init_projection(spec.tuple_len * d, config.projection_dim, config.seed,
                                 config.ln_eps, config.ln_affine)
    else:
        params = replace(IDENTITY, eps=config.ln_eps)
    lw = None
    if spec.kind == "linear":
        size = len(enumerate_tuples(n, spec.tuple_len, spec.tuple_mode))
        lw = spec.linear_weights if spec.linear_weights is not None else np.full((size, size), 1.0 / size**2)
    return TrainState(params, math.log(config.tau_init), lw)


def _check_trainable(spec):
    if spec.kind == "dtw" and spec.dtw_gamma <= 0:
        raise MatcherError("hard DTW (gamma = 0) is not differentiable; use gamma > 0 for training")


def _forward(episode, spec, state):
    check_spec_for_episode(spec, episode)
    spec = state.spec_for(spec)
    tuples = enumerate_tuples(episode.n, spec.tuple_len, spec.tuple_mode)
    videos = [fs for fs, _ in episode.queries] + [fs for row in episode.support for fs in row]
    feats = np.stack([tuple_features(v.clips, tuples) for v in videos])
    V, r, k = feats.shape
    out, cache = project_forward(state.params, feats.reshape(V * r, k))
    proj = out.reshape(V, r, -1)
    nq = len(episode.queries)
    q = proj[:nq]
    s = proj[nq:].reshape((episode.way, episode.shot) + proj.shape[1:])
    M = np.einsum("qiD,wsjD->qwsij", q, s)
    return spec, cache, q, s, M


def _class_scores(spec, M, dS=None, shot=1):
    """Class scores, and if ``dS`` is given also dM and the Linear-weight grad."""
    if dS is None:
        return class_scores_from_matrices(M, spec)
    if spec.joint:
        J = stack_to_joint(M)
        S, dJ, dW = matcher_backward(spec, J, dS)
        return S, joint_to_stack(dJ, shot), dW
    up = np.repeat(dS[..., None] / shot, shot, axis=-1)
    vals, dM, dW = matcher_backward(spec, M, up)
    return vals.mean(axis=-1), dM, dW


def _softmax_ce(logits, targets):
    shift = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logz
    rows = np.arange(len(targets))
    return -logp[rows, targets].mean(), np.exp(logp)


def episode_loss(episode, spec, state, need_grad=True):
    """Cross-entropy of tau-scaled class scores and (optionally) its gradients.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``state.blocks()``
    (``tau`` is the derivative w.r.t. ``log_tau``), or ``(loss, None)``.
    """
    _check_trainable(spec)
    if not episode.queries:
        raise ValueError("episode has no queries")
    spec_w, cache, q, s, M = _forward(episode, spec, state)
    targets = np.array([c for _, c in episode.queries])
    nq = len(targets)
    tau = state.tau
    if not need_grad:
        S = _class_scores(spec_w, M)
        return _softmax_ce(tau * S, targets)[0], None

    S = _class_scores(spec_w, M)
    loss, probs = _softmax_ce(tau * S, targets)
    dlogits = probs.copy()
    dlogits[np.arange(nq), targets] -= 1.0
    dlogits /= nq
    dS = tau * dlogits
    grads = {}
    _, dM, dW = _class_scores(spec_w, M, dS, episode.shot)
    dq = np.einsum("qwsij,wsjD->qiD", dM, s)
    ds = np.einsum("qwsij,qiD->wsjD", dM, q)
    dproj = np.concatenate([dq.reshape(-1, dq.shape[-1]), ds.reshape(-1, ds.shape[-1])])
    pgrads, _ = project_backward_cached(state.params, cache, dproj)
    names = {"W": pgrads.dW, "g": pgrads.dg, "beta": pgrads.dbeta}
    for name in state.params.trainable():
        grads[name] = names[name]
    grads["tau"] = np.array([tau * float((dlogits * S).sum())])
    if state.linear_weights is not None:
        grads["linear_weights"] = dW if dW is not None else np.zeros_like(state.linear_weights)
    return loss, grads


def train_step(state, episode, spec, config):
    """One SGD step ``t <- t - lr * dloss/dt`` on every trainable block."""
    _, grads = episode_loss(episode, spec, state)
    blocks = state.blocks()
    new = {k: blocks[k] - config.lr * grads[k] for k in blocks}
    return state.with_blocks(new)


def min_tie_margin(episode, spec, state):
    """Smallest top-two gap over every max the matcher takes in this episode."""
    spec_w, _, _, _, M = _forward(episode, spec, state)
    return tie_margin(spec_w.kind, stack_to_joint(M) if spec_w.joint else M)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    tolerance: float = 1e-5
    excluded: bool = False

    @property
    def passed(self):
        return self.excluded or all(e <= self.tolerance for e in self.errors.values())

    def failing(self):
        return [k for k, e in self.errors.items() if e > self.tolerance]


REL_FLOOR = 1e-3


def relative_error(a, b, floor=REL_FLOOR):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero partials
    from being judged on finite-difference round-off alone."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(state, episode, spec, step=1e-6, tolerance=1e-5, corrupt=None, tie_tol=1e-7):
    """Compare every analytic partial of ``episode_loss`` with central differences.

    ``corrupt`` maps a block name to ``(flat_index, delta)`` added to the
    analytic gradient before comparing (harness self-test).  Episodes with a
    max tie closer than ``tie_tol`` are reported as excluded.
    """
    report = GradCheckReport(tolerance=tolerance)
    if min_tie_margin(episode, spec, state) < tie_tol:
        report.excluded = True
        return report
    _, grads = episode_loss(episode, spec, state)
    blocks = state.blocks()
    for name, block in blocks.items():
        analytic = np.array(grads[name], dtype=np.float64).reshape(-1)
        if corrupt and name in corrupt:
            idx, delta = corrupt[name]
            analytic[idx] += delta
        flat = np.array(block, dtype=np.float64).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            values = []
            for sign in (1.0, -1.0):
                trial = flat.copy()
                trial[i] += sign * step
                b = dict(blocks)
                b[name] = trial.reshape(np.shape(block))
                values.append(episode_loss(episode, spec, state.with_blocks(b), need_grad=False)[0])
            numeric = (values[0] - values[1]) / (2 * step)
            worst = max(worst, relative_error(analytic[i], numeric))
        report.errors[name] = worst
        report.counts[name] = flat.size
    return report


def train(config, dataset, spec, state=None, on_epoch=None):
    """Train with early stopping; return ``(best_state, log_rows)``.

    ``dataset`` is anything with ``split(name) -> {label: [FeatureSet]}``.
    Each log row is ``(epoch, mean_train_loss, val_accuracy, tau)``.
    """
    config.validate()
    _check_trainable(spec)
    train_split = dataset.split("train")
    val_split = dataset.split("val")
    if not train_split:
        raise DataError("training split required")
    if not val_split:
        raise DataError("validation split required")
    val_eps = build_fixed_test_episodes(val_split, config.way, config.shot, config.queries,
                                        config.val_episodes, config.val_seed)
    if not val_eps:
        raise DataError("validation split required")
    sample = next(iter(train_split.values()))[0]
    if state is None:
        state = initial_state(spec, config, sample.n, sample.d)
    rng = Xoshiro256(config.seed)
    if state.rng_state is not None:
        rng.setstate(state.rng_state)

    best = None
    log = []
    stale = 0
    counter = 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(config.episodes_per_epoch):
            ep = sample_episode(train_split, config.way, config.shot, config.queries, rng, counter)
            counter += 1
            loss, grads = episode_loss(ep, spec, state)
            losses.append(loss)
            blocks = state.blocks()
            state = state.with_blocks({k: blocks[k] - config.lr * grads[k] for k in blocks})
        acc, _ = evaluate(val_eps, state.spec_for(spec), state.params)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        state = replace(state, epoch=epoch, rng_state=rng.getstate())
        log.append((epoch, mean_loss, acc, state.tau))
        if on_epoch is not None:
            on_epoch(log[-1])
        if best is None or acc > best.best_val:
            best = replace(state, best_val=acc, best_epoch=epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, log


def format_log(log):
    lines = ["epoch\tmean_train_loss\tval_accuracy\ttau"]
    lines += [f"{e}\t{loss!r}\t{acc!r}\t{tau!r}" for e, loss, acc, tau in log]
    return "\n".join(lines) + "\n"


def encode_checkpoint(state):
    """Projection checkpoint + u64 epoch + f64 tau + u32 size + linear weights."""
    lw = state.linear_weights
    size = 0 if lw is None else lw.shape[0]
    tail = struct.pack("<QdI", state.epoch, state.tau, size)
    if lw is not None:
        tail += np.asarray(lw, dtype="<f8").tobytes()
    return encode_projection(state.params) + tail


def decode_checkpoint(data):
    params, used = decode_projection(data)
    if len(data) < used + 20:
        raise ProjectionError("truncated checkpoint")
    epoch, tau, size = struct.unpack("<QdI", data[used:used + 20])
    lw = None
    if size:
        need = used + 20 + 8 * size * size
        if len(data) < need:
            raise ProjectionError("truncated checkpoint")
        lw = np.frombuffer(data, dtype="<f8", count=size * size, offset=used + 20).reshape(size, size).copy()
    return TrainState(params, math.log(tau), lw, epoch)


def save_checkpoint(state, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
