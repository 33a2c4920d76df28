import numpy as np
import pytest

from causaltad.errors import ConfigError, PlacementFailure
from causaltad.synth import SynthConfig, generate, generate_dataset

SMALL = SynthConfig(
    num_videos=6,
    T=64,
    D=8,
    num_classes=3,
    actions_min=1,
    actions_max=2,
    min_action_len=10,
    max_action_len=20,
    cue_len=3,
    noise_std=0.3,
    feature_fps=2.0,
    val_fraction=0.5,
    seed=7,
)


def dataset_bytes(root):
    chunks = [(root / "manifest.json").read_bytes(), (root / "annotations.json").read_bytes()]
    for f in sorted((root / "features").iterdir()):
        chunks.append(f.read_bytes())
    return b"".join(chunks)


def test_seed_determinism_on_disk(tmp_path):
    generate_dataset(SMALL, tmp_path / "a")
    generate_dataset(SMALL, tmp_path / "b")
    assert dataset_bytes(tmp_path / "a") == dataset_bytes(tmp_path / "b")


def test_in_memory_determinism():
    seqs_a, db_a = generate(SMALL)
    seqs_b, db_b = generate(SMALL)
    assert sorted(seqs_a) == sorted(seqs_b)
    for vid in seqs_a:
        assert np.array_equal(seqs_a[vid].features, seqs_b[vid].features)
    assert db_a.videos == db_b.videos


def test_noise_free_action_mean_is_motif():
    cfg = SynthConfig(
        num_videos=4,
        T=64,
        D=8,
        num_classes=1,
        actions_min=1,
        actions_max=2,
        min_action_len=10,
        max_action_len=16,
        cue_len=3,
        noise_std=0.0,
        motif_scale=1.0,
        seed=3,
        feature_fps=2.0,
    )
    seqs, db = generate(cfg)
    motifs = []
    for vid, rec in db.videos.items():
        x = seqs[vid].features
        for seg in rec.segments:
            lo = int(round(seg.start_s * cfg.feature_fps))
            hi = int(round(seg.end_s * cfg.feature_fps))
            # the amplitude ramp is mean-preserving, so the interval mean is
            # exactly the class motif
            motifs.append(x[lo:hi].mean(axis=0))
    motifs = np.stack(motifs)
    assert np.allclose(motifs, motifs[0], atol=1e-5)
    assert np.allclose(np.linalg.norm(motifs[0]), cfg.motif_scale, atol=1e-5)


def test_annotations_inside_duration():
    seqs, db = generate(SMALL)
    for vid, rec in db.videos.items():
        for seg in rec.segments:
            assert 0.0 <= seg.start_s < seg.end_s <= rec.duration_s
            assert 0 <= seg.label_id < db.num_classes


def test_cues_sit_strictly_outside_action():
    cfg = SynthConfig(
        num_videos=3,
        T=80,
        D=6,
        num_classes=2,
        actions_min=1,
        actions_max=1,
        min_action_len=12,
        max_action_len=12,
        cue_len=4,
        noise_std=0.0,
        seed=11,
        feature_fps=4.0,
    )
    seqs, db = generate(cfg)
    for vid, rec in db.videos.items():
        x = seqs[vid].features
        seg = rec.segments[0]
        lo = int(round(seg.start_s * cfg.feature_fps))
        hi = int(round(seg.end_s * cfg.feature_fps))
        # cue bands are non-zero, and touch neither the action interval
        # nor the far background
        assert np.abs(x[lo - cfg.cue_len : lo]).max() > 0
        assert np.abs(x[hi : hi + cfg.cue_len]).max() > 0
        if lo - cfg.cue_len > 0:
            assert np.abs(x[: lo - cfg.cue_len]).max() == 0
        if hi + cfg.cue_len < cfg.T:
            assert np.abs(x[hi + cfg.cue_len :]).max() == 0


def test_split_sizes():
    _, db = generate(SMALL)
    assert len(db.subset_ids("train")) == 3
    assert len(db.subset_ids("val")) == 3


def test_placement_failure():
    cfg = SynthConfig(
        num_videos=1,
        T=40,
        D=4,
        num_classes=1,
        actions_min=2,
        actions_max=2,
        min_action_len=16,
        max_action_len=16,
        cue_len=4,
        seed=0,
    )
    with pytest.raises(PlacementFailure):
        generate(cfg)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(cue_len=20, min_action_len=16).validate()
    with pytest.raises(ConfigError):
        SynthConfig(T=16, max_action_len=48).validate()
    with pytest.raises(ConfigError):
        SynthConfig(val_fraction=1.0).validate()
