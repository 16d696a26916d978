"""Feature files, dataset manifest, synthetic data and episode sampling.

Feature file layout (little-endian)::

    b"FVF1" | u32 n | u32 d | n*d float32, clip-major

Manifest: UTF-8 TSV with header ``video_id\\tclass\\tsplit\\tpath``; paths are
relative to the manifest's directory.
"""

import csv
import math
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

MAGIC = b"FVF1"
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("video_id", "class", "split", "path")


class FeatureFormatError(ValueError):
    pass


class DataError(ValueError):
    """Malformed dataset, or a split too small for the requested episodes."""


@dataclass(eq=False)
class FeatureSet:
    """One video: ``n`` ordered clip features of dimension ``d`` (float32)."""

    video_id: str
    clips: np.ndarray

    def __post_init__(self):
        clips = np.asarray(self.clips, dtype=np.float32)
        if clips.ndim != 2 or clips.shape[0] < 1 or clips.shape[1] < 1:
            raise FeatureFormatError(f"clips must be a non-empty n x d array, got shape {clips.shape}")
        if not np.all(np.isfinite(clips)):
            raise FeatureFormatError("non-finite feature")
        self.clips = clips

    @property
    def n(self):
        return self.clips.shape[0]

    @property
    def d(self):
        return self.clips.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.clips.shape == other.clips.shape
            and self.clips.tobytes() == other.clips.tobytes()
        )

    def __repr__(self):
        return f"FeatureSet({self.video_id!r}, n={self.n}, d={self.d})"


def encode_feature_set(fs: FeatureSet) -> bytes:
    clips = np.asarray(fs.clips, dtype=np.float32)
    if not np.all(np.isfinite(clips)):
        raise FeatureFormatError("non-finite feature")
    n, d = clips.shape
    return MAGIC + struct.pack("<II", n, d) + clips.astype("<f4").tobytes()


def decode_feature_set(data: bytes, video_id: str) -> FeatureSet:
    if len(data) < 12:
        raise FeatureFormatError("truncated header")
    if data[:4] != MAGIC:
        raise FeatureFormatError("bad magic")
    n, d = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * d
    if len(data) < expected:
        raise FeatureFormatError("truncated payload")
    if len(data) > expected:
        raise FeatureFormatError("trailing bytes after payload")
    if n == 0 or d == 0:
        raise FeatureFormatError("empty feature set")
    clips = np.frombuffer(data, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    if not np.all(np.isfinite(clips)):
        raise FeatureFormatError("non-finite feature")
    return FeatureSet(video_id, clips.astype(np.float32))


def write_feature_file(fs: FeatureSet, destination):
    Path(destination).write_bytes(encode_feature_set(fs))


def read_feature_file(source, video_id=None) -> FeatureSet:
    source = Path(source)
    return decode_feature_set(source.read_bytes(), video_id if video_id is not None else source.stem)


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    label: str
    split: str
    path: str


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def labels(self, name):
        return sorted({e.label for e in self.entries if e.split == name})

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\t".join(MANIFEST_HEADER) + "\n")
            for e in self.entries:
                fh.write(f"{e.video_id}\t{e.label}\t{e.split}\t{e.path}\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
        if not rows or tuple(rows[0]) != MANIFEST_HEADER:
            raise DataError(f"{path}: manifest header must be {MANIFEST_HEADER}")
        entries = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            entries.append(ManifestEntry(*row))
        return cls(entries)

    def validate(self, root=None):
        """Check id uniqueness, split names and class disjointness; if ``root``
        is given also parse every referenced feature file."""
        seen = set()
        by_split = {s: set() for s in SPLITS}
        for e in self.entries:
            if e.video_id in seen:
                raise DataError(f"duplicate video_id {e.video_id!r}")
            seen.add(e.video_id)
            if e.split not in by_split:
                raise DataError(f"unknown split {e.split!r} for {e.video_id!r}")
            by_split[e.split].add(e.label)
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1:]:
                shared = by_split[a] & by_split[b]
                if shared:
                    raise DataError(f"classes shared between {a} and {b}: {sorted(shared)}")
        if root is not None:
            root = Path(root)
            for e in self.entries:
                p = root / e.path
                if not p.is_file():
                    raise DataError(f"missing feature file {p}")
                read_feature_file(p, e.video_id)


class Dataset:
    """A manifest plus its feature files, loaded lazily and cached."""

    def __init__(self, manifest, root, features=None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self._cache = dict(features or {})

    @classmethod
    def open(cls, directory, validate=True):
        directory = Path(directory)
        manifest = Manifest.read(directory / "manifest.tsv")
        if validate:
            manifest.validate(directory)
        return cls(manifest, directory)

    def load(self, entry):
        fs = self._cache.get(entry.video_id)
        if fs is None:
            fs = read_feature_file(self.root / entry.path, entry.video_id)
            self._cache[entry.video_id] = fs
        return fs

    def split(self, name):
        """Map class label -> FeatureSets sorted by video_id."""
        out = {}
        for e in sorted(self.manifest.split(name), key=lambda e: e.video_id):
            out.setdefault(e.label, []).append(self.load(e))
        return dict(sorted(out.items()))


@dataclass
class SyntheticSpec:
    """Classes per split, clip count, feature dim and noise of a synthetic set.

    Every split receives ``num_classes`` fresh classes; within each split the
    first ``2 * order_pairs`` classes form pairs (A, B) where B reuses A's
    prototypes in reversed temporal order.  Clip ``i`` of a video is
    prototype ``i`` plus isotropic Gaussian noise of per-component std
    ``noise_sigma / sqrt(d)``, so ``noise_sigma`` is the expected noise norm
    relative to the unit prototype.  With ``noise_per_component`` the std is
    ``noise_sigma`` itself.
    """

    num_classes: int = 24
    segments: int = 8
    d: int = 16
    noise_sigma: float = 0.5
    order_pairs: int = 0
    videos_per_class: dict = field(default_factory=lambda: {"train": 10, "val": 10, "test": 10})
    seed: int = 0
    noise_per_component: bool = False

    def validate(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.num_classes < 1 or self.segments < 1 or self.d < 1:
            raise ValueError("num_classes, segments and d must be >= 1")
        if self.order_pairs < 0 or 2 * self.order_pairs > self.num_classes:
            raise ValueError("order_pairs * 2 must not exceed num_classes")
        for s in SPLITS:
            if self.videos_per_class.get(s, 0) < 0:
                raise ValueError(f"videos_per_class[{s}] must be non-negative")

    def noise_scale(self):
        """Per-component noise std."""
        if self.noise_per_component:
            return self.noise_sigma
        return self.noise_sigma / math.sqrt(self.d)

    def reversed_pairs(self, split):
        return [(class_label(split, 2 * p), class_label(split, 2 * p + 1)) for p in range(self.order_pairs)]


def class_label(split, index):
    return f"{split}_c{index:03d}"


def synthesize(spec: SyntheticSpec):
    """Build the synthetic dataset in memory: ``(Manifest, {video_id: FeatureSet})``.

    Draw order (one stream): for each split, for each class, the prototypes
    (unless the class is the reversed partner), then each video's noise.
    """
    spec.validate()
    rng = Xoshiro256(spec.seed)
    entries, features = [], {}
    for split in SPLITS:
        protos = {}
        for c in range(spec.num_classes):
            if c < 2 * spec.order_pairs and c % 2 == 1:
                protos[c] = protos[c - 1][::-1].copy()
            else:
                p = np.empty((spec.segments, spec.d))
                for i in range(spec.segments):
                    v = rng.normal_array(spec.d)
                    norm = np.linalg.norm(v)
                    while norm == 0.0:
                        v = rng.normal_array(spec.d)
                        norm = np.linalg.norm(v)
                    p[i] = v / norm
                protos[c] = p
            label = class_label(split, c)
            for v in range(spec.videos_per_class.get(split, 0)):
                vid = f"{label}_v{v:03d}"
                clips = protos[c]
                if spec.noise_sigma > 0:
                    clips = clips + spec.noise_scale() * rng.normal_array(clips.shape)
                features[vid] = FeatureSet(vid, clips.astype(np.float32))
                entries.append(ManifestEntry(vid, label, split, f"features/{vid}.fvf"))
    return Manifest(entries), features


def generate_synthetic(spec: SyntheticSpec, out_dir):
    """Write the synthetic dataset (manifest.tsv + features/) under ``out_dir``."""
    manifest, features = synthesize(spec)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        write_feature_file(features[e.video_id], out_dir / e.path)
    manifest.write(out_dir / "manifest.tsv")
    return Dataset(manifest, out_dir, features)


@dataclass(eq=False)
class Episode:
    """``way``-way ``shot``-shot task; ``support[c][s]`` belongs to class ``c``."""

    way: int
    shot: int
    support: list
    queries: list
    episode_id: int = 0
    class_labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.support) != self.way or any(len(s) != self.shot for s in self.support):
            raise ValueError("support must hold exactly `shot` sets for each of `way` classes")
        for _, c in self.queries:
            if not 0 <= c < self.way:
                raise ValueError(f"query class {c} outside 0..{self.way - 1}")
        shapes = {fs.clips.shape for row in self.support for fs in row}
        shapes |= {fs.clips.shape for fs, _ in self.queries}
        if len(shapes) > 1:
            raise ValueError(f"feature sets disagree on (n, d): {sorted(shapes)}")

    @property
    def n(self):
        return self.support[0][0].n

    @property
    def d(self):
        return self.support[0][0].d

    def fingerprint(self):
        parts = [str(self.episode_id), str(self.way), str(self.shot), ",".join(self.class_labels)]
        for row in self.support:
            parts.append(",".join(fs.video_id for fs in row))
        parts.append(",".join(f"{fs.video_id}:{c}" for fs, c in self.queries))
        return "|".join(parts)


def sample_episode(split, way, shot, queries_per_class, rng, episode_id=0):
    """Draw one episode from ``split`` (class label -> list of FeatureSets).

    Classes come from a partial Fisher-Yates over the sorted labels; within a
    class ``shot + queries_per_class`` videos are drawn the same way over the
    videos sorted by id, the first ``shot`` becoming supports.
    """
    labels = sorted(split)
    if way < 1 or shot < 1 or queries_per_class < 0:
        raise ValueError("way and shot must be >= 1, queries_per_class >= 0")
    if len(labels) < way:
        raise DataError(f"insufficient classes: need {way}, split has {len(labels)}")
    chosen = [labels[i] for i in rng.sample(len(labels), way)]
    support, queries = [], []
    need = shot + queries_per_class
    for c, label in enumerate(chosen):
        videos = sorted(split[label], key=lambda fs: fs.video_id)
        if len(videos) < need:
            raise DataError(f"insufficient videos in class {label!r}: need {need}, have {len(videos)}")
        picked = [videos[i] for i in rng.sample(len(videos), need)]
        support.append(picked[:shot])
        queries.extend((fs, c) for fs in picked[shot:])
    return Episode(way, shot, support, queries, episode_id, chosen)


def build_fixed_test_episodes(split, way, shot, queries_per_class, count, seed):
    """``count`` episodes from one stream seeded with ``seed``; ids 0..count-1."""
    rng = Xoshiro256(seed)
    return [sample_episode(split, way, shot, queries_per_class, rng, i) for i in range(count)]


def episodes_checksum(episodes):
    h = hashlib.sha256()
    for ep in episodes:
        h.update(ep.fingerprint().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
