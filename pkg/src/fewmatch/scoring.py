"""Per-class scores, nearest-class prediction and episodic evaluation."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from .matchers import (
    MatcherError,
    apply_matcher,
    enumerate_tuples,
    row_argmax,
    similarity_matrix,
    stack_to_joint,
)
from .projection import IDENTITY, project_batch, tuple_features


@dataclass
class EpisodeResult:
    episode_id: int
    true_classes: list
    predicted: list
    scores: np.ndarray

    @property
    def correct(self):
        return sum(int(p == t) for p, t in zip(self.predicted, self.true_classes))

    @property
    def accuracy(self):
        return self.correct / len(self.true_classes) if self.true_classes else 0.0


def check_spec_for_episode(spec, episode):
    if spec.tuple_len > episode.n:
        raise MatcherError(f"tuple length {spec.tuple_len} exceeds clip count {episode.n}")
    if spec.joint and episode.shot > 1 and spec.kind in ("diag", "linear", "dtw"):
        raise MatcherError(f"joint aggregation over {episode.shot} shots gives a non-square matrix; "
                           f"{spec.kind} needs square matrices")


def project_videos(videos, spec, params):
    """Projected tuple features for each video, stacked: ``(len(videos), n', D)``."""
    n = videos[0].n
    tuples = enumerate_tuples(n, spec.tuple_len, spec.tuple_mode)
    feats = np.stack([tuple_features(v.clips, tuples) for v in videos])
    V, rows, k = feats.shape
    return project_batch(params, feats.reshape(V * rows, k)).reshape(V, rows, -1)


def class_scores_from_matrices(M, spec):
    """Reduce ``(..., way, shot, r, c)`` similarity stacks to ``(..., way)`` class scores."""
    if spec.joint:
        return apply_matcher(spec, stack_to_joint(M))
    return apply_matcher(spec, M).mean(axis=-1)


def episode_similarities(episode, spec, params=IDENTITY, queries=None):
    """Similarity stack ``(num_queries, way, shot, r, c)`` for an episode."""
    check_spec_for_episode(spec, episode)
    if queries is None:
        queries = [fs for fs, _ in episode.queries]
    supports = [fs for row in episode.support for fs in row]
    proj = project_videos(list(queries) + supports, spec, params)
    nq = len(queries)
    q = proj[:nq]
    s = proj[nq:].reshape((episode.way, episode.shot) + proj.shape[1:])
    return np.einsum("qiD,wsjD->qwsij", q, s)


def score_query(query, episode, spec, params=IDENTITY):
    """Class scores of one query FeatureSet against the episode's supports."""
    M = episode_similarities(episode, spec, params, [query])
    return class_scores_from_matrices(M, spec)[0]


def score_episode(episode, spec, params=IDENTITY):
    if not episode.queries:
        return np.zeros((0, episode.way))
    return class_scores_from_matrices(episode_similarities(episode, spec, params), spec)


def predict(scores):
    """Index of the best class; the smallest index wins ties."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty scores")
    return int(np.argmax(scores))


def result_from_scores(episode, scores):
    return EpisodeResult(
        episode.episode_id,
        [c for _, c in episode.queries],
        [predict(s) for s in scores],
        np.asarray(scores, dtype=np.float64),
    )


def _matcher_episode(episode, spec, params):
    return result_from_scores(episode, score_episode(episode, spec, params))


def _run_chunk(fn, episodes):
    return [fn(ep) for ep in episodes]


def run_episodes(fn, episodes, workers=1):
    """Apply ``fn`` to every episode, preserving order whatever ``workers`` is.

    Episodes are split into contiguous chunks whose results land in their
    pre-assigned slots, so the output never depends on the worker count.
    """
    episodes = list(episodes)
    if workers <= 1 or len(episodes) < 2:
        return [fn(ep) for ep in episodes]
    workers = min(workers, len(episodes))
    bounds = np.linspace(0, len(episodes), workers + 1).astype(int)
    chunks = [episodes[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    slots = [None] * len(chunks)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_run_chunk, fn, chunk): i for i, chunk in enumerate(chunks)}
        for fut, i in futures.items():
            slots[i] = fut.result()
    return [r for chunk in slots for r in chunk]


def mean_accuracy(results):
    correct = sum(r.correct for r in results)
    total = sum(len(r.true_classes) for r in results)
    return correct / total if total else 0.0


def evaluate(episodes, spec, params=IDENTITY, workers=1):
    """Mean query accuracy over ``episodes`` and the per-episode results."""
    results = run_episodes(partial(_matcher_episode, spec=spec, params=params), episodes, workers)
    return mean_accuracy(results), results


def confidence_interval(accuracy, count, z=1.959963984540054):
    """95% normal-approximation interval of a proportion."""
    if count == 0:
        return (0.0, 0.0)
    half = z * math.sqrt(max(accuracy * (1.0 - accuracy), 0.0) / count)
    return (accuracy - half, accuracy + half)


def format_results(results, way):
    """Results TSV body: header plus one row per query."""
    cols = ["episode_id", "query_index", "true_class", "predicted_class"] + [f"score_{c}" for c in range(way)]
    lines = ["\t".join(cols)]
    for r in results:
        for qi, (t, p) in enumerate(zip(r.true_classes, r.predicted)):
            row = [str(r.episode_id), str(qi), str(t), str(p)] + [repr(float(v)) for v in r.scores[qi]]
            lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def summary_line(method, accuracy, count):
    lo, hi = confidence_interval(accuracy, count)
    return f"# summary\tmethod={method}\tqueries={count}\taccuracy={accuracy:.6f}\tci95=[{lo:.6f},{hi:.6f}]"


def correspondences(episode, query_index, spec, params=IDENTITY):
    """Row-wise Chamfer-Q argmax of a query against each class's joint matrix.

    Returns rows ``(query_clip, support_video, support_clip, similarity)``.
    """
    query = episode.queries[query_index][0]
    M = episode_similarities(episode, spec, params, [query])[0]
    rows = []
    for c in range(episode.way):
        J = stack_to_joint(M[c])
        idx, val = row_argmax(J)
        cols = M.shape[-1]
        for i, (j, v) in enumerate(zip(idx, val)):
            support = episode.support[c][j // cols]
            rows.append((i, support.video_id, int(j % cols), float(v)))
    return rows
