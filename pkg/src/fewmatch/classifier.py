"""Per-episode linear classifier baseline.

A fresh ``way x d`` softmax classifier is fit on the support clips of each
episode (every clip is a sample labelled with its video's class) and a
query is scored by summing the per-clip class probabilities.
"""

from dataclasses import dataclass
from functools import partial

import numpy as np

from .rng import Xoshiro256
from .scoring import mean_accuracy, result_from_scores, run_episodes


@dataclass
class EpisodeClassifier:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, way, d):
        return cls(np.zeros((way, d)), np.zeros(way))


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p -= (self.lr / c1) * m / denom


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def support_samples(episode):
    X = np.concatenate([fs.clips for row in episode.support for fs in row]).astype(np.float64)
    y = np.concatenate([np.full(fs.n, c) for c, row in enumerate(episode.support) for fs in row])
    return X, y


def fit_episode_classifier(episode, epochs=10, lr=0.01, seed=None, batch_size=1):
    """Fit a zero-initialised classifier on the episode's support clips with Adam.

    Each epoch visits every support clip once in an order drawn from the
    portable stream seeded with ``seed`` (default: the episode id), taking one
    step per ``batch_size`` clips.  ``batch_size=None`` means one full-batch
    step per epoch.
    """
    X, y = support_samples(episode)
    N, d = X.shape
    # bias folded in as a constant-one input column
    Xa = np.hstack([X, np.ones((N, 1))])
    Wa = np.zeros((episode.way, d + 1))
    opt = Adam([Wa.shape], lr)
    rng = Xoshiro256(episode.episode_id if seed is None else seed)
    step = N if batch_size is None else batch_size
    onehot = np.eye(episode.way)[y]
    for _ in range(epochs):
        order = rng.permutation(N)
        for start in range(0, N, step):
            idx = order[start:start + step]
            xb = Xa[idx]
            p = _softmax(xb @ Wa.T)
            p -= onehot[idx]
            p /= len(idx)
            opt.step([Wa], [p.T @ xb])
    return EpisodeClassifier(Wa[:, :d].copy(), Wa[:, d].copy())


def classify_query(h, query):
    """Sum over clips of the per-clip softmax outputs."""
    clips = np.asarray(query.clips if hasattr(query, "clips") else query, dtype=np.float64)
    if clips.shape[-1] != h.weights.shape[1]:
        raise ValueError(f"dimension mismatch: classifier expects {h.weights.shape[1]}, got {clips.shape[-1]}")
    return _softmax(clips @ h.weights.T + h.bias).sum(axis=0)


def _classifier_episode(episode, epochs, lr, batch_size):
    h = fit_episode_classifier(episode, epochs, lr, batch_size=batch_size)
    scores = np.stack([classify_query(h, fs) for fs, _ in episode.queries]) if episode.queries \
        else np.zeros((0, episode.way))
    return result_from_scores(episode, scores)


def evaluate_classifier(episodes, epochs=10, lr=0.01, batch_size=1, workers=1):
    fn = partial(_classifier_episode, epochs=epochs, lr=lr, batch_size=batch_size)
    results = run_episodes(fn, episodes, workers)
    return mean_accuracy(results), results
