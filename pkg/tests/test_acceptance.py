"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary and when this file is run directly.
"""

import time

import numpy as np
import pytest

from fewmatch.check import check_chamfer, check_dtw, check_gradients, check_joint, check_permutations
from fewmatch.classifier import evaluate_classifier
from fewmatch.cli import main
from fewmatch.features import Dataset, SyntheticSpec, build_fixed_test_episodes, synthesize
from fewmatch.matchers import MatcherSpec, enumerate_tuples
from fewmatch.scoring import evaluate

RESULTS = {}


def record(number, name, passed, detail):
    RESULTS[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {name}: {detail}"
    print(RESULTS[number])
    assert passed, RESULTS[number]


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def in_memory(spec):
    manifest, features = synthesize(spec)
    return Dataset(manifest, None, features)


@pytest.fixture(scope="module")
def prototype_data():
    """24 classes per split, no order pairs, noise 0.5."""
    return in_memory(SyntheticSpec(num_classes=24, segments=8, d=16, noise_sigma=0.5, order_pairs=0, seed=0))


def test_c01_chamfer_oracle():
    res, dt = timed(check_chamfer, np.random.default_rng(1), count=1000)
    record(1, "Chamfer vs brute force", res.passed and dt < 1.0,
           f"{res.tested} matrices, {res.detail}, {dt:.2f}s (limit 1s)")


def test_c02_dtw_enumeration():
    res, dt = timed(check_dtw, np.random.default_rng(2), count=200)
    record(2, "hard DTW vs path enumeration", res.passed and dt < 5.0,
           f"{res.tested} matrices, {res.detail}, {dt:.2f}s (limit 5s)")


def test_c03_gradients():
    res, dt = timed(check_gradients, np.random.default_rng(3), count=50)
    record(3, "gradient fidelity", res.passed and dt < 30.0,
           f"{res.tested} partials, {res.detail}, rel tol 1e-5, {dt:.2f}s (limit 30s)")


def test_c04_permutation_invariance():
    res, dt = timed(check_permutations, np.random.default_rng(4), count=100)
    record(4, "permutation invariance", res.passed, f"{res.tested} episodes, {res.detail}")


def test_c05_joint_identities():
    res, dt = timed(check_joint, np.random.default_rng(5), count=100)
    record(5, "joint matching identities", res.passed, f"{res.tested} episodes, {res.detail}")


def test_c06_tuple_counts():
    ordered = len(enumerate_tuples(8, 3, "ordered"))
    arranged = len(enumerate_tuples(8, 3, "all"))
    record(6, "tuple combinatorics", ordered == 56 and arranged == 336,
           f"ordered {ordered} (want 56), all {arranged} (want 336)")


def test_c07_temporal_order_separation():
    t = time.perf_counter()
    # the smallest split in which every class has a reversed partner and 5-way is possible
    data = in_memory(SyntheticSpec(num_classes=6, segments=8, d=16, noise_sigma=0.1, order_pairs=3, seed=0))
    eps = build_fixed_test_episodes(data.split("test"), 5, 1, 1, 1000, 0)
    acc = {k: evaluate(eps, MatcherSpec(k))[0] for k in ("diag", "dtw", "mean")}
    dt = time.perf_counter() - t
    ok = acc["diag"] >= 0.95 and acc["dtw"] >= 0.95 and acc["mean"] <= 0.65 and dt < 120
    record(7, "temporal-order separation", ok,
           f"diag {acc['diag']:.4f} dtw {acc['dtw']:.4f} (>= 0.95), mean {acc['mean']:.4f} (<= 0.65), "
           f"{dt:.1f}s (limit 120s)")


def test_c08_prototype_separation(prototype_data):
    t = time.perf_counter()
    eps = build_fixed_test_episodes(prototype_data.split("test"), 5, 5, 1, 1000, 0)
    joint, _ = evaluate(eps, MatcherSpec("chamfer_qs", aggregation="joint"))
    mean, _ = evaluate(eps, MatcherSpec("mean"))
    dt = time.perf_counter() - t
    ok = joint >= mean - 0.01 and joint >= 0.90 and mean >= 0.90 and dt < 120
    record(8, "prototype separation", ok,
           f"chamfer_qs joint {joint:.4f}, mean {mean:.4f} (both >= 0.90, joint >= mean - 0.01), "
           f"{dt:.1f}s (limit 120s)")


def test_c09_classifier_baseline(prototype_data):
    test = prototype_data.split("test")
    five = build_fixed_test_episodes(test, 5, 5, 1, 1000, 0)
    clf5, _ = evaluate_classifier(five)
    one = build_fixed_test_episodes(test, 5, 1, 1, 1000, 0)
    clf1, _ = evaluate_classifier(one)
    matchers = {k: evaluate(one, MatcherSpec(k))[0] for k in ("mean", "max", "chamfer_q", "chamfer_s",
                                                            "chamfer_qs", "diag", "linear")}
    best = max(matchers, key=matchers.get)
    ok = clf5 >= 0.90 and clf1 <= matchers[best] + 0.02
    record(9, "classifier baseline", ok,
           f"5-shot classifier {clf5:.4f} (>= 0.90); 1-shot classifier {clf1:.4f} vs best matcher "
           f"{best} {matchers[best]:.4f} (margin <= 0.02)")


def test_c10_reproducibility(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--num-classes", "10", "--seed", "7"]) == 0
    common = ["eval", "--data", str(data), "--method", "chamfer_qs,dtw,classifier", "--ways", "5",
              "--episodes", "60", "--seed", "3"]
    runs = {"a": ["--workers", "1"], "b": ["--workers", "1"], "c": ["--workers", "3"]}
    for name, extra in runs.items():
        assert main(common + ["--out", str(tmp_path / name)] + extra) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same_twice = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    same_workers = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "c" / f).read_bytes() for f in files)
    record(10, "reproducibility", same_twice and same_workers and len(files) == 4,
           f"{len(files)} output files; identical across runs: {same_twice}; across worker counts: {same_workers}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
