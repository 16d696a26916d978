"""Command-line entry point: ``fewmatch {synth,train,eval,check,dump-correspondences}``.

Options may come from a flat ``key = value`` config file (``--config``);
flags given on the command line override it.  Exit codes: 0 success,
1 usage error, 2 data error, 3 verification failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .check import FAULTS, run_checks
from .classifier import evaluate_classifier
from .features import (
    DataError,
    Dataset,
    FeatureFormatError,
    SyntheticSpec,
    build_fixed_test_episodes,
    episodes_checksum,
    generate_synthetic,
)
from .matchers import KINDS, MatcherError, MatcherSpec
from .projection import IDENTITY, ProjectionError
from .scoring import confidence_interval, correspondences, evaluate, format_results, summary_line
from .trainer import TrainConfig, format_log, load_checkpoint, save_checkpoint, train

log = logging.getLogger("fewmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
METHODS = KINDS + ("classifier",)
NOT_IN_HASH = {"workers", "config", "command", "handler", "out", "verbose"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path):
    """Flat ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    cfg = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = parts
        cfg[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return cfg


def _add_matcher_args(p):
    p.add_argument("--tuple-len", type=int, default=1, help="clip tuple length l (default: 1)")
    p.add_argument("--tuple-mode", choices=("ordered", "all"), default="ordered",
                   help="ordered combinations or all arrangements (default: ordered)")
    p.add_argument("--joint", action="store_true", help="match all shots of a class jointly")
    p.add_argument("--dtw-gamma", type=float, default=0.0, help="soft-DTW smoothing; 0 = exact (default: 0)")


def build_parser():
    parser = _Parser(prog="fewmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fewmatch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--num-classes", type=int, default=24, help="classes per split (default: 24)")
    p.add_argument("--segments", type=int, default=8, help="clips per video n (default: 8)")
    p.add_argument("--d", type=int, default=16, help="feature dimension (default: 16)")
    p.add_argument("--noise-sigma", type=float, default=0.5,
                   help="noise norm relative to the unit prototype (default: 0.5)")
    p.add_argument("--noise-per-component", action="store_true",
                   help="treat --noise-sigma as the per-component std instead")
    p.add_argument("--order-pairs", type=int, default=0, help="reversed-order class pairs per split (default: 0)")
    p.add_argument("--videos-train", type=int, default=10)
    p.add_argument("--videos-val", type=int, default=10)
    p.add_argument("--videos-test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train the projection head episodically")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (manifest.tsv + features/)")
    p.add_argument("--out", help="output directory for checkpoint.fpp and train_log.tsv")
    p.add_argument("--method", choices=KINDS, default="chamfer_qs")
    _add_matcher_args(p)
    p.add_argument("--projection", choices=("learned", "identity"), default="learned")
    p.add_argument("--projection-dim", type=int, default=1152, help="D (default: 1152)")
    p.add_argument("--ln-eps", type=float, default=1e-5)
    p.add_argument("--no-ln-affine", action="store_true", help="layer norm without gain/bias")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau-init", type=float, default=10.0)
    p.add_argument("--episodes-per-epoch", type=int, default=200)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=1, help="queries per class (default: 1)")
    p.add_argument("--val-episodes", type=int, default=200)
    p.add_argument("--val-seed", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-tau-only", action="store_true",
                   help="permit training when only the temperature is trainable")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate methods on fixed test episodes")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", help="output directory for results and summary")
    p.add_argument("--method", type=_str_list, default=["chamfer_qs"],
                   help=f"comma-separated methods from {', '.join(METHODS)}")
    _add_matcher_args(p)
    p.add_argument("--checkpoint", help="trained checkpoint; identity projection if omitted")
    p.add_argument("--ways", type=_int_list, default=[5], help="comma-separated way counts (default: 5)")
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--episodes", type=int, default=1000, help="test episodes per way (default: 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clf-epochs", type=int, default=10)
    p.add_argument("--clf-lr", type=float, default=0.01)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("check", help="run the oracle verification suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=FAULTS, help="deliberately break one component (self-test)")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("dump-correspondences", help="row-wise Chamfer-Q matches of one query")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", help="TSV file (default: stdout)")
    p.add_argument("--episode-id", type=int, default=0)
    p.add_argument("--query-index", type=int, default=0)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tuple-len", type=int, default=1)
    p.add_argument("--tuple-mode", choices=("ordered", "all"), default="ordered")
    p.add_argument("--checkpoint")
    p.set_defaults(handler=cmd_dump)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file if any."""
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, value in cfg.items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for command {args.command}")
            action = actions[key]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                lowered = value.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise UsageError(f"config key {key!r} expects a boolean")
                value = lowered in ("true", "1", "yes")
            defaults[key] = value
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    env_seed = os.environ.get("FEWMATCH_SEED")
    if env_seed is not None and hasattr(args, "seed"):
        args.seed = int(env_seed)
    return args


def config_hash(args):
    items = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_IN_HASH}
    return hashlib.sha256(json.dumps(items, sort_keys=True, default=str).encode()).hexdigest()


def header_lines(args, **extra):
    lines = [
        f"# fewmatch {__version__}",
        f"# command: {args.command}",
        f"# config_sha256: {config_hash(args)}",
        f"# seed: {getattr(args, 'seed', None)}",
    ]
    lines += [f"# {k}: {v}" for k, v in extra.items()]
    return lines


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def cmd_synth(args):
    _require(args, "out")
    spec = SyntheticSpec(
        num_classes=args.num_classes,
        segments=args.segments,
        d=args.d,
        noise_sigma=args.noise_sigma,
        order_pairs=args.order_pairs,
        videos_per_class={"train": args.videos_train, "val": args.videos_val, "test": args.videos_test},
        seed=args.seed,
        noise_per_component=args.noise_per_component,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    ds = generate_synthetic(spec, args.out)
    lines = header_lines(args)
    for split in ("train", "val", "test"):
        labels = ds.manifest.labels(split)
        lines.append(f"{split}: {len(labels)} classes, {len(ds.manifest.split(split))} videos")
    pairs = [p for split in ("train", "val", "test") for p in spec.reversed_pairs(split)]
    lines.append(f"reversed pairs: {len(pairs)} ({2 * len(pairs)} classes)")
    lines += [f"  {a} <-> {b}" for a, b in pairs]
    text = "\n".join(lines) + "\n"
    Path(args.out, "synth_summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _matcher_spec(args, kind):
    return MatcherSpec(kind, args.tuple_len, args.tuple_mode, "joint" if args.joint else "single_average",
                       args.dtw_gamma)


def cmd_train(args):
    _require(args, "data", "out")
    if args.projection == "identity" and args.method != "linear" and not args.allow_tau_only:
        raise UsageError("no trainable parameters except temperature (pass --allow-tau-only to train anyway)")
    spec = _matcher_spec(args, args.method)
    config = TrainConfig(
        lr=args.lr, tau_init=args.tau_init, episodes_per_epoch=args.episodes_per_epoch,
        max_epochs=args.max_epochs, patience=args.patience, seed=args.seed, way=args.way,
        shot=args.shot, queries=args.queries, val_episodes=args.val_episodes, val_seed=args.val_seed,
        projection=args.projection, projection_dim=args.projection_dim, ln_eps=args.ln_eps,
        ln_affine=not args.no_ln_affine,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    ds = Dataset.open(args.data)
    if not ds.manifest.split("val"):
        raise DataError("validation split required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best, rows = train(config, ds, spec, on_epoch=lambda r: log.info("epoch %d loss %.5f val %.4f tau %.4f", *r))
    save_checkpoint(best, out / "checkpoint.fpp")
    head = header_lines(args, matcher=spec.describe(), best_epoch=best.best_epoch)
    (out / "train_log.tsv").write_text("\n".join(head) + "\n" + format_log(rows), encoding="utf-8")
    print(f"best epoch {best.best_epoch}: val accuracy {best.best_val:.4f}, tau {best.tau:.4f}")
    return EXIT_OK


def _load_model(args):
    if getattr(args, "checkpoint", None):
        state = load_checkpoint(args.checkpoint)
        return state.params, state.linear_weights
    return IDENTITY, None


def cmd_eval(args):
    _require(args, "data", "out")
    for m in args.method:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if not args.ways:
        raise UsageError("--ways must list at least one way count")
    ds = Dataset.open(args.data)
    test = ds.split("test")
    if not test:
        raise DataError("test split is empty")
    params, weights = _load_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = [f"method\tway\tshot\tepisodes\tqueries\taccuracy\tci95_low\tci95_high"]
    checksums = {}
    for way in args.ways:
        episodes = build_fixed_test_episodes(test, way, args.shot, args.queries, args.episodes, args.seed)
        checksums[way] = episodes_checksum(episodes)
        for method in args.method:
            started = time.perf_counter()
            if method == "classifier":
                acc, results = evaluate_classifier(episodes, args.clf_epochs, args.clf_lr, workers=args.workers)
                tag = "classifier"
            else:
                spec = _matcher_spec(args, method)
                if weights is not None and method == "linear":
                    spec = spec.with_weights(weights)
                acc, results = evaluate(episodes, spec, params, workers=args.workers)
                tag = spec.describe()
            count = sum(len(r.true_classes) for r in results)
            lo, hi = confidence_interval(acc, count)
            head = header_lines(args, method=tag, way=way, episodes_sha256=checksums[way])
            body = format_results(results, way)
            (out / f"results_{tag}_way{way}.tsv").write_text(
                "\n".join(head) + "\n" + body + summary_line(tag, acc, count) + "\n", encoding="utf-8")
            summary.append(f"{tag}\t{way}\t{args.shot}\t{len(episodes)}\t{count}\t{acc:.6f}\t{lo:.6f}\t{hi:.6f}")
            log.info("%s way=%d accuracy %.4f (%.1fs)", tag, way, acc, time.perf_counter() - started)
    head = header_lines(args, **{f"episodes_sha256_way{w}": c for w, c in checksums.items()})
    text = "\n".join(head + summary) + "\n"
    (out / "summary.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_check(args):
    results = run_checks(args.seed, args.inject_fault)
    lines = header_lines(args, fault=args.inject_fault or "none") + [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"FAILED: {', '.join(failed)}" if failed else "all checks passed")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_dump(args):
    _require(args, "data")
    ds = Dataset.open(args.data)
    episodes = build_fixed_test_episodes(ds.split("test"), args.way, args.shot, args.queries,
                                         args.episode_id + 1, args.seed)
    episode = episodes[args.episode_id]
    if not 0 <= args.query_index < len(episode.queries):
        raise UsageError(f"--query-index must be in [0, {len(episode.queries)})")
    params, _ = _load_model(args)
    spec = MatcherSpec("chamfer_q", args.tuple_len, args.tuple_mode, "joint")
    rows = correspondences(episode, args.query_index, spec, params)
    lines = header_lines(args, episodes_sha256=episodes_checksum(episodes))
    lines.append("query_clip\tsupport_video\tsupport_clip\tsimilarity")
    lines += [f"{i}\t{vid}\t{j}\t{v!r}" for i, vid, j, v in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:
            return exc.code
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.handler(args)
    except UsageError as exc:
        print(f"fewmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MatcherError, ProjectionError) as exc:
        print(f"fewmatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FeatureFormatError, FileNotFoundError) as exc:
        print(f"fewmatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
