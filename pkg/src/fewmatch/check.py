"""Oracle verification suite run by ``fewmatch check``."""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import matchers, oracles
from .features import Episode, FeatureSet
from .matchers import KINDS, MatcherSpec, stack_to_joint
from .projection import init_projection
from .scoring import class_scores_from_matrices, episode_similarities, score_episode
from .trainer import TrainState, finite_diff_check

FAULTS = ("chamfer_sign", "dtw_sign", "grad_w")


@dataclass
class CheckResult:
    name: str
    passed: bool
    tested: int
    unit: str
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<24} {self.tested} {self.unit}{extra}"


def _impl(fault):
    chamfer = matchers.match_chamfer
    dtw = matchers.match_dtw
    if fault == "chamfer_sign":
        def chamfer(variant, M):
            return -matchers.match_chamfer(variant, M)
    elif fault == "dtw_sign":
        def dtw(M, gamma=0.0):
            return -matchers.match_dtw(M, gamma)
    return chamfer, dtw


def check_chamfer(rng, fault=None, count=1000):
    chamfer, _ = _impl(fault)
    worst = 0.0
    for _ in range(count):
        r, c = rng.integers(1, 9, size=2)
        M = rng.uniform(-1, 1, size=(r, c))
        ref = oracles.chamfer_naive(M.tolist())
        got = [chamfer(v, M) for v in ("Q", "S", "QS")]
        worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
    return CheckResult("chamfer_bruteforce", worst <= 1e-12, count, "matrices", f"max abs err {worst:.2e}")


def check_dtw(rng, fault=None, count=200):
    _, dtw = _impl(fault)
    paths = {n: oracles.monotone_paths(n, n) for n in range(1, 6)}
    mismatches = 0
    enumerated = 0
    for t in range(count):
        n = 1 + t % 5
        M = rng.uniform(-1, 1, size=(n, n))
        ref = oracles.dtw_enumerate(M.tolist(), paths[n])
        enumerated += len(paths[n])
        if dtw(M, 0.0) != ref:
            mismatches += 1
    return CheckResult("dtw_enumeration", mismatches == 0, count, "matrices",
                       f"{enumerated} paths, {mismatches} mismatches")


def random_episode(rng, n=3, d=4, way=3, shot=2, queries=1):
    support = [[FeatureSet(f"s{c}_{s}", rng.standard_normal((n, d))) for s in range(shot)] for c in range(way)]
    qs = [(FeatureSet(f"q{c}_{i}", rng.standard_normal((n, d))), c) for c in range(way) for i in range(queries)]
    return Episode(way, shot, support, qs)


GRAD_SPECS = (
    MatcherSpec("chamfer_qs"),
    MatcherSpec("chamfer_qs", aggregation="joint"),
    MatcherSpec("chamfer_q", tuple_len=2, aggregation="joint"),
    MatcherSpec("chamfer_s"),
    MatcherSpec("mean"),
    MatcherSpec("max"),
    MatcherSpec("diag"),
    MatcherSpec("linear"),
    MatcherSpec("dtw", dtw_gamma=0.1),
)


def random_state(rng, spec, d=4, D=5, n=3):
    params = init_projection(spec.tuple_len * d, D, int(rng.integers(0, 2**31)))
    params = params.with_arrays(g=1.0 + 0.3 * rng.standard_normal(D), beta=0.3 * rng.standard_normal(D))
    lw = None
    if spec.kind == "linear":
        size = math.comb(n, spec.tuple_len) if spec.tuple_mode == "ordered" else math.perm(n, spec.tuple_len)
        lw = rng.standard_normal((size, size))
    return TrainState(params, float(rng.uniform(0.0, 2.5)), lw)


def check_gradients(rng, fault=None, count=50):
    failures, params_tested, excluded = 0, 0, 0
    corrupt = {"W": (0, 0.1)} if fault == "grad_w" else None
    for t in range(count):
        spec = GRAD_SPECS[t % len(GRAD_SPECS)]
        ep = random_episode(rng)
        state = random_state(rng, spec)
        rep = finite_diff_check(state, ep, spec, corrupt=corrupt)
        if rep.excluded:
            excluded += 1
            continue
        params_tested += sum(rep.counts.values())
        failures += not rep.passed
    return CheckResult("gradient_fd", failures == 0, params_tested, "parameters",
                       f"{count} episodes, {failures} failing, {excluded} tie-excluded")


def _permuted(ep, rng):
    """Same episode with the clips of every video independently shuffled."""
    def shuffle(fs):
        return FeatureSet(fs.video_id, fs.clips[rng.permutation(fs.n)])
    support = [[shuffle(fs) for fs in row] for row in ep.support]
    return Episode(ep.way, ep.shot, support, [(shuffle(fs), c) for fs, c in ep.queries])


ORDER_FREE = ("mean", "max", "chamfer_q", "chamfer_s", "chamfer_qs")


def order_witness():
    """Query e0 e1 e2; class 0 support in the same order, class 1 reversed."""
    e = np.eye(3)
    support = [[FeatureSet("fwd", e)], [FeatureSet("rev", e[::-1])]]
    return Episode(2, 1, support, [(FeatureSet("q", e), 0)])


def check_permutations(rng, fault=None, count=100):
    chamfer, dtw = _impl(fault)
    broken = 0
    for _ in range(count):
        ep = random_episode(rng, n=int(rng.integers(2, 9)))
        perm = _permuted(ep, rng)
        a = episode_similarities(ep, MatcherSpec("mean"))
        b = episode_similarities(perm, MatcherSpec("mean"))
        for kind in ORDER_FREE:
            spec = MatcherSpec(kind)
            broken += not np.array_equal(class_scores_from_matrices(a, spec), class_scores_from_matrices(b, spec))
        for v in ("Q", "S", "QS"):
            broken += not np.array_equal(chamfer(v, a), chamfer(v, b))
    # reversing the columns of an identity matrix is the temporal witness
    W = np.eye(4)
    R = W[:, ::-1]
    witness = (matchers.match_simple("diag", R) != matchers.match_simple("diag", W)
               and dtw(R, 0.0) != dtw(W, 0.0))
    ep = order_witness()
    flipped = Episode(2, 1, ep.support, [(FeatureSet("q", ep.queries[0][0].clips[::-1]), 0)])
    pp = MatcherSpec("chamfer_qs", tuple_len=2)
    witness = witness and score_episode(ep, pp).argmax() != score_episode(flipped, pp).argmax()
    ok = broken == 0 and witness
    return CheckResult("permutation_invariance", ok, count, "episodes",
                       f"{broken} invariance breaks, temporal witnesses {'found' if witness else 'missing'}")


def check_joint(rng, fault=None, count=100):
    chamfer, _ = _impl(fault)
    bad = 0
    for kind in KINDS:
        spec = MatcherSpec(kind, dtw_gamma=0.1 if kind == "dtw" else 0.0)
        ep = random_episode(rng, n=4, shot=1)
        M = episode_similarities(ep, spec)
        single = class_scores_from_matrices(M, spec)
        joint = class_scores_from_matrices(M, replace(spec, aggregation="joint"))
        bad += not np.array_equal(single, joint)
    for _ in range(count):
        ep = random_episode(rng, n=int(rng.integers(1, 9)), shot=5)
        M = episode_similarities(ep, MatcherSpec("chamfer_q"))
        joint = chamfer("Q", stack_to_joint(M))
        per_shot = chamfer("Q", M).mean(axis=-1)
        bad += int(np.sum(joint < per_shot))
    return CheckResult("joint_matching", bad == 0, count + len(KINDS), "episodes", f"{bad} violations")


def check_tuples(rng=None, fault=None):
    cases = [(n, l) for n in range(1, 9) for l in range(1, n + 1)]
    bad = 0
    for n, l in cases:
        bad += len(matchers.enumerate_tuples(n, l, "ordered")) != math.comb(n, l)
        bad += len(matchers.enumerate_tuples(n, l, "all")) != math.perm(n, l)
    return CheckResult("tuple_counts", bad == 0, len(cases), "(n, l) pairs")


def run_checks(seed=0, fault=None):
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    rng = np.random.default_rng(seed)
    return [
        check_chamfer(rng, fault),
        check_dtw(rng, fault),
        check_gradients(rng, fault),
        check_permutations(rng, fault),
        check_joint(rng, fault),
        check_tuples(rng, fault),
    ]
