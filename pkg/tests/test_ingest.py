import numpy as np
import numpy.testing as npt
import pytest

from thermoseg import ingest
from thermoseg.ingest import (FrameSequence, IngestError, LabelMask,
                              SaturatedPixelError, crop,
                              first_unsaturated_frame, load_mask,
                              load_sequence, save_mask, trim_mask,
                              write_sequence)


def make_sequence(frames=5, height=3, width=4, saturation=np.inf):
    rng = np.random.default_rng(0)
    data = rng.uniform(1.0, 9.0, (frames, height, width))
    ts = np.linspace(0.5, 2.5, frames)
    return FrameSequence(width, height, frames, ts, data, saturation)


def test_sequence_validation():
    seq = make_sequence()
    assert seq.data.shape == (5, 3, 4)
    with pytest.raises(IngestError):
        FrameSequence(4, 3, 5, np.array([1.0, 2.0]), seq.data, np.inf)
    with pytest.raises(IngestError):
        FrameSequence(4, 3, 5, np.array([0.0, 1, 2, 3, 4.0]), seq.data, np.inf)
    with pytest.raises(IngestError):
        FrameSequence(4, 3, 5, np.array([1.0, 2, 2, 3, 4.0]), seq.data, np.inf)
    with pytest.raises(IngestError):
        FrameSequence(5, 3, 5, seq.timestamps, seq.data, np.inf)


def test_write_then_load_round_trip(tmp_path):
    seq = make_sequence(frames=4, height=2, width=3, saturation=100.0)
    manifest = write_sequence(seq, str(tmp_path))
    back = load_sequence(manifest)
    assert (back.width, back.height, back.frame_count) == (3, 2, 4)
    npt.assert_array_equal(back.data, seq.data)
    npt.assert_array_equal(back.timestamps, seq.timestamps)
    assert back.saturation_value == 100.0


def test_load_sequence_fps_timestamps(tmp_path):
    frame = tmp_path / "f0.csv"
    frame.write_text("1.0,2.0\n3.0,4.0\n")
    man = tmp_path / "manifest.txt"
    man.write_text("width = 2\nheight = 2\nfps = 4\nframe = f0.csv\n")
    seq = load_sequence(str(man))
    npt.assert_allclose(seq.timestamps, [0.25])
    npt.assert_array_equal(seq.data[0], [[1.0, 2.0], [3.0, 4.0]])


def test_load_sequence_errors(tmp_path):
    man = tmp_path / "manifest.txt"
    man.write_text("width = 2\nheight = 2\nfps = 4\nframe = missing.csv\n")
    with pytest.raises(IngestError):      # frame file absent
        load_sequence(str(man))

    frame = tmp_path / "f0.csv"
    frame.write_text("1.0,2.0,9.0\n3.0,4.0,9.0\n")
    man.write_text("width = 2\nheight = 2\nfps = 4\nframe = f0.csv\n")
    with pytest.raises(IngestError):      # 3 columns, manifest says 2
        load_sequence(str(man))

    frame.write_text("1.0,abc\n3.0,4.0\n")
    man.write_text("width = 2\nheight = 2\nfps = 4\nframe = f0.csv\n")
    with pytest.raises(IngestError):      # non-numeric cell
        load_sequence(str(man))

    man.write_text("width = 2\nheight = 2\nframe = f0.csv\n")
    with pytest.raises(IngestError):      # no timing at all
        load_sequence(str(man))


def test_crop_bounds():
    seq = make_sequence(height=6, width=8)
    sub = crop(seq, 2, 1, 4, 3)
    assert (sub.width, sub.height) == (4, 3)
    npt.assert_array_equal(sub.data, seq.data[:, 1:4, 2:6])
    with pytest.raises(IngestError):
        crop(seq, 5, 0, 4, 3)
    with pytest.raises(IngestError):
        crop(seq, 0, 0, 0, 3)


def test_first_unsaturated_frame():
    seq = make_sequence(saturation=8.0)
    data = seq.data.copy()
    data[:3, 1, 2] = 9.0
    seq2 = FrameSequence(4, 3, 5, seq.timestamps, np.minimum(data, 12.0), 8.0)
    assert first_unsaturated_frame(seq2, (1, 2)) == 3
    data[:, 0, 0] = 9.0
    seq3 = FrameSequence(4, 3, 5, seq.timestamps, data, 8.0)
    with pytest.raises(SaturatedPixelError):
        first_unsaturated_frame(seq3, (0, 0))
    with pytest.raises(IngestError):
        first_unsaturated_frame(seq2, (9, 9))


def brute_force_trim(mask, margin):
    height, width = mask.height, mask.width
    valid = np.zeros_like(mask.valid)
    for r in range(height):
        for c in range(width):
            if not mask.valid[r, c]:
                continue
            keep = (r >= margin and c >= margin
                    and r < height - margin and c < width - margin)
            if keep:
                for dr in range(-margin, margin + 1):
                    for dc in range(-margin, margin + 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < height and 0 <= cc < width:
                            if mask.labels[rr, cc] != mask.labels[r, c]:
                                keep = False
            valid[r, c] = keep
    return valid


def test_trim_mask_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(10):
        height, width = int(rng.integers(6, 14)), int(rng.integers(6, 14))
        labels = rng.integers(0, 3, (height, width)).astype(np.int64)
        valid = rng.random((height, width)) > 0.1
        mask = LabelMask(width, height, labels, valid)
        margin = int(rng.integers(0, 4))
        got = trim_mask(mask, margin)
        npt.assert_array_equal(got.valid, brute_force_trim(mask, margin))
        npt.assert_array_equal(got.labels, labels)


def test_trim_mask_idempotent_and_never_revalidates():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 4, (20, 20)).astype(np.int64)
    valid = rng.random((20, 20)) > 0.2
    mask = LabelMask(20, 20, labels, valid)
    once = trim_mask(mask, 2)
    twice = trim_mask(once, 2)
    npt.assert_array_equal(once.valid, twice.valid)
    assert not (once.valid & ~mask.valid).any()


def test_trim_quadrants_interior_counts():
    # four quadrants on a 20x16 canvas, margin 3: interiors are 4x2
    labels = np.zeros((16, 20), dtype=np.int64)
    labels[:, 10:] += 1
    labels[8:, :] += 2
    mask = LabelMask(20, 16, labels, np.ones((16, 20), bool))
    out = trim_mask(mask, 3)
    for cls in range(4):
        assert (out.valid & (labels == cls)).sum() == 4 * 2


def test_mask_pgm_round_trip(tmp_path):
    labels = np.array([[0, 1, 2], [3, 1, 0]], dtype=np.int64)
    valid = np.array([[True, True, False], [True, False, True]])
    mask = LabelMask(3, 2, labels, valid)
    path = str(tmp_path / "mask.pgm")
    save_mask(mask, path)
    back = load_mask(path)
    npt.assert_array_equal(back.valid, valid)
    npt.assert_array_equal(back.labels[valid], labels[valid])
    assert (back.labels[~valid] == ingest.INVALID_LABEL).all()
