import numpy as np
import pytest
from PIL import Image

from cascadetrack.dataio import (DataError, SequenceBundle, SynthConfig, crop_patch, load_root, load_sequence,
                                 motion_path, patch_origin, read_annotations, save_sequence, sequence_dirs,
                                 synth_dataset, synth_sequence, to_unit)

SMALL = SynthConfig(n_frames=12, seed=3)


def test_synth_is_deterministic():
    a, b = synth_sequence(SMALL), synth_sequence(SMALL)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.landmarks == b.landmarks
    c = synth_sequence(SynthConfig(n_frames=12, seed=4))
    assert not np.array_equal(a.frames[5], c.frames[5])


def test_synth_defaults():
    cfg = SynthConfig()
    assert (cfg.motion_amplitude, cfg.motion_freq, cfg.hz) == (8.0, 0.25, 15.0)
    assert cfg.speckle and cfg.n_distractors == 2 and cfg.jump_prob == 0.02


def test_synth_truth_follows_motion():
    seq = synth_sequence(SMALL)
    path = seq.truth["1"]
    assert path.shape == (12, 2)
    disp, _ = motion_path(SMALL, np.random.default_rng(0))
    assert disp.shape == (12, 2)
    # landmark blob is the brightest structure near the annotated point
    f = seq.frames[6].astype(float)
    x, y = np.round(path[6]).astype(int)
    assert f[y - 2:y + 3, x - 2:x + 3].mean() > f.mean()


def test_motion_without_jumps_is_sinusoid():
    cfg = SynthConfig(jump_prob=0.0, motion_phase=0.0, motion_angle_deg=90.0)
    disp, events = motion_path(cfg, np.random.default_rng(0))
    t = np.arange(cfg.n_frames)
    assert events == []
    assert np.allclose(disp[:, 1], 8.0 * np.sin(2 * np.pi * 0.25 * t / 15.0))
    assert np.allclose(disp[:, 0], 0.0, atol=1e-12)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(jump_prob=1.5)
    with pytest.raises(ValueError):
        SynthConfig(motion_amplitude=60.0)


def test_round_trip_through_disk(tmp_path):
    seq = synth_sequence(SMALL)
    save_sequence(seq, tmp_path / "s")
    back = load_sequence(tmp_path / "s")
    assert back.n_frames == seq.n_frames
    assert all(np.array_equal(x, y) for x, y in zip(seq.frames, back.frames))
    assert back.landmarks == seq.landmarks
    assert (back.spacing_mm, back.hz, back.source_tag) == (seq.spacing_mm, seq.hz, seq.source_tag)
    assert [p.name for p in back.frame_paths][:2] == ["frame_00000.png", "frame_00001.png"]


def test_load_root_and_sequence_dirs(tmp_path):
    for s in synth_dataset(2, SMALL, seed0=7):
        save_sequence(s, tmp_path / s.name)
    assert [d.name for d in sequence_dirs(tmp_path)] == ["SYN-0007", "SYN-0008"]
    assert len(load_root(tmp_path)) == 2
    assert sequence_dirs(tmp_path / "SYN-0007") == [tmp_path / "SYN-0007"]


def test_sixteen_bit_frames(tmp_path):
    arr = (np.arange(64 * 64).reshape(64, 64) * 7).astype(np.uint16)
    d = tmp_path / "s16"
    d.mkdir()
    Image.fromarray(arr).save(d / "frame_00000.png")
    (d / "landmark_a.csv").write_text("0,10.5,20\n")
    seq = load_sequence(d)
    assert seq.frames[0].dtype == np.uint16
    assert np.array_equal(seq.frames[0], arr)
    assert seq.landmarks == {"a": [(0, 10.5, 20.0)]}


def test_missing_first_frame_annotation(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("frame_index,x,y\n1,2,3\n")
    with pytest.raises(DataError, match="first-frame"):
        read_annotations(p)


@pytest.mark.parametrize("text", ["0,1,2\n0,1,2\n", "0,1\n", "0,a,2\n", "0,1,2\n9,1,1\n"])
def test_bad_annotations(tmp_path, text):
    p = tmp_path / "l.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        read_annotations(p, n_frames=5)


def test_frame_gap_rejected(tmp_path):
    seq = synth_sequence(SMALL)
    d = save_sequence(seq, tmp_path / "s")
    (d / "frame_00003.png").unlink()
    with pytest.raises(DataError, match="consecutively"):
        load_sequence(d)


def test_bundle_validation():
    with pytest.raises(DataError):
        SequenceBundle(frames=[], spacing_mm=1, hz=1, landmarks={})
    with pytest.raises(DataError):
        SequenceBundle(frames=[np.zeros((4, 4)), np.zeros((5, 4))], spacing_mm=1, hz=1, landmarks={})


def test_crop_patch_geometry():
    frame = np.arange(100, dtype=np.uint8).reshape(10, 10)
    p = crop_patch(frame, (5, 5), 4)
    assert patch_origin((5, 5), 4) == (3, 3)
    assert np.allclose(p, frame[3:7, 3:7] / 255.0)
    edge = crop_patch(frame, (0, 0), 4)
    assert np.all(edge[:2, :] == 0) and np.all(edge[:, :2] == 0)
    assert np.allclose(edge[2:, 2:], frame[:2, :2] / 255.0)


def test_to_unit():
    assert to_unit(np.array([[0, 65535]], dtype=np.uint16)).tolist() == [[0.0, 1.0]]
    assert to_unit(np.array([[-1.0, 2.0]])).tolist() == [[0.0, 1.0]]
