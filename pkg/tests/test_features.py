import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewmatch.features import (
    DataError,
    Dataset,
    FeatureFormatError,
    FeatureSet,
    Manifest,
    ManifestEntry,
    SyntheticSpec,
    build_fixed_test_episodes,
    decode_feature_set,
    encode_feature_set,
    episodes_checksum,
    generate_synthetic,
    read_feature_file,
    sample_episode,
    synthesize,
    write_feature_file,
)
from fewmatch.rng import Xoshiro256


def test_tiny_file_layout(tmp_path):
    p = tmp_path / "a.fvf"
    write_feature_file(FeatureSet("a", [[1.0, 0.0]]), p)
    data = p.read_bytes()
    # magic (4) + n (4) + d (4) + two float32 (8)
    assert len(data) == 20
    assert data[:4] == b"FVF1"
    assert data[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(data[12:], "<f4").tolist() == [1.0, 0.0]


def test_roundtrip_large(tmp_path):
    clips = np.random.default_rng(0).standard_normal((8, 512)).astype(np.float32)
    fs = FeatureSet("v", clips)
    write_feature_file(fs, tmp_path / "v.fvf")
    back = read_feature_file(tmp_path / "v.fvf")
    assert back == fs
    assert back.clips.tobytes() == clips.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(clips):
    fs = FeatureSet("x", clips)
    assert decode_feature_set(encode_feature_set(fs), "x") == fs


def test_nan_rejected():
    with pytest.raises(FeatureFormatError, match="non-finite feature"):
        FeatureSet("a", [[np.nan, 0.0]])


def test_bad_magic():
    data = bytearray(encode_feature_set(FeatureSet("a", [[1.0, 2.0]])))
    data[0:4] = b"XXXX"
    with pytest.raises(FeatureFormatError, match="bad magic"):
        decode_feature_set(bytes(data), "a")


def test_truncated_payload():
    data = b"FVF1" + (2).to_bytes(4, "little") * 2 + np.zeros(3, "<f4").tobytes()
    with pytest.raises(FeatureFormatError, match="truncated payload"):
        decode_feature_set(data, "a")


def test_truncated_header():
    with pytest.raises(FeatureFormatError, match="truncated header"):
        decode_feature_set(b"FVF1\x01", "a")


def test_manifest_roundtrip_and_validation(tmp_path):
    m = Manifest([ManifestEntry("a", "c0", "train", "a.fvf"), ManifestEntry("b", "c1", "test", "b.fvf")])
    m.write(tmp_path / "m.tsv")
    assert Manifest.read(tmp_path / "m.tsv") == m
    m.validate()
    with pytest.raises(DataError, match="duplicate"):
        Manifest(m.entries + [ManifestEntry("a", "c2", "val", "x")]).validate()
    with pytest.raises(DataError, match="shared"):
        Manifest(m.entries + [ManifestEntry("z", "c0", "test", "x")]).validate()
    with pytest.raises(DataError, match="missing feature file"):
        m.validate(tmp_path)


def test_zero_noise_videos_identical():
    spec = SyntheticSpec(num_classes=2, noise_sigma=0.0, videos_per_class={"train": 2, "val": 0, "test": 0})
    _, feats = synthesize(spec)
    assert feats["train_c000_v000"].clips.tobytes() == feats["train_c000_v001"].clips.tobytes()


def test_zero_noise_reversed_pair():
    spec = SyntheticSpec(num_classes=4, noise_sigma=0.0, order_pairs=2)
    _, feats = synthesize(spec)
    a = feats["test_c002_v000"].clips
    b = feats["test_c003_v000"].clips
    assert np.array_equal(b, a[::-1])
    assert spec.reversed_pairs("test") == [("test_c000", "test_c001"), ("test_c002", "test_c003")]


def test_noise_scale_is_relative_to_unit_prototype():
    spec = SyntheticSpec(num_classes=1, d=64, noise_sigma=0.5, videos_per_class={"train": 200, "val": 0, "test": 0})
    clean = synthesize(SyntheticSpec(**{**spec.__dict__, "noise_sigma": 0.0}))[1]
    noisy = synthesize(spec)[1]
    # same stream prefix: prototypes coincide, so the difference is the noise
    diffs = [noisy[k].clips - clean[k].clips for k in noisy]
    norms = np.linalg.norm(np.concatenate(diffs), axis=1)
    assert abs(norms.mean() - 0.5) < 0.02


def test_noise_per_component_option():
    spec = SyntheticSpec(d=16, noise_sigma=0.5, noise_per_component=True)
    assert spec.noise_scale() == 0.5
    assert SyntheticSpec(d=16, noise_sigma=0.5).noise_scale() == 0.125


def _dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generation_deterministic(tmp_path):
    spec = SyntheticSpec(num_classes=6, seed=11)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")
    ds = Dataset.open(tmp_path / "a")
    assert set(ds.manifest.labels("train")).isdisjoint(ds.manifest.labels("test"))
    assert len(ds.manifest.labels("val")) == 6


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=4, order_pairs=3).validate()
    with pytest.raises(ValueError):
        SyntheticSpec(noise_sigma=-1).validate()


def test_sample_episode_structure(small_dataset):
    split = small_dataset.split("test")
    ep = sample_episode(split, 5, 1, 1, Xoshiro256(0))
    assert ep.way == 5 and len(ep.support) == 5 and len(ep.queries) == 5
    assert len(set(ep.class_labels)) == 5
    for fs, c in ep.queries:
        assert fs.video_id.startswith(ep.class_labels[c])
        assert fs.video_id not in {s.video_id for s in ep.support[c]}


def test_sample_episode_errors(small_dataset):
    split = dict(list(small_dataset.split("test").items())[:4])
    with pytest.raises(DataError, match="insufficient classes"):
        sample_episode(split, 5, 1, 1, Xoshiro256(0))
    with pytest.raises(DataError, match="insufficient videos"):
        sample_episode(split, 2, 8, 3, Xoshiro256(0))


def test_sample_episode_deterministic(small_dataset):
    split = small_dataset.split("test")
    a = sample_episode(split, 5, 2, 1, Xoshiro256(9))
    b = sample_episode(split, 5, 2, 1, Xoshiro256(9))
    assert a.fingerprint() == b.fingerprint()


def test_fixed_episodes(small_dataset):
    split = small_dataset.split("test")
    assert build_fixed_test_episodes(split, 5, 1, 1, 0, 0) == []
    a = build_fixed_test_episodes(split, 5, 1, 1, 100, 0)
    b = build_fixed_test_episodes(split, 5, 1, 1, 100, 0)
    assert len(a) == 100 and all(ep.way == 5 for ep in a)
    assert [ep.episode_id for ep in a] == list(range(100))
    assert episodes_checksum(a) == episodes_checksum(b)
    assert episodes_checksum(a) != episodes_checksum(build_fixed_test_episodes(split, 5, 1, 1, 100, 1))
