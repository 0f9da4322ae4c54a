"""Loading, validation, cropping and masking of thermographic sequences.

A sequence on disk is one CSV file per frame (rows = image rows, comma
separated columns) plus a manifest sidecar - a flat key=value text file
listing the frame files in order together with the timing, dimensions and
sensor ceiling. Label masks are binary PGMs where the pixel value is the
class id and 255 marks invalid pixels.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputeError, ValidationError
from .pgmio import read_pgm, write_pgm

INVALID_LABEL = 255


class IngestError(ValidationError):
    pass


class SaturatedPixelError(ComputeError):
    """Raised when a pixel has no unsaturated suffix to fit."""


@dataclass(frozen=True)
class FrameSequence:
    """A time-ordered stack of 2-D frames with strictly increasing timestamps.

    data is (frame_count, height, width) float64; timestamps are seconds
    since the excitation flash, all positive so log-time is defined.
    """
    width: int
    height: int
    frame_count: int
    timestamps: np.ndarray
    data: np.ndarray
    saturation_value: float
    units: str = "counts"

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.frame_count < 1:
            raise IngestError("width, height and frame_count must be >= 1")
        if self.timestamps.shape != (self.frame_count,):
            raise IngestError("timestamp count must equal frame count")
        if self.timestamps[0] <= 0 or np.any(np.diff(self.timestamps) <= 0):
            raise IngestError("timestamps must be strictly increasing and > 0")
        if self.data.shape != (self.frame_count, self.height, self.width):
            raise IngestError(
                f"data shape {self.data.shape} does not match "
                f"({self.frame_count}, {self.height}, {self.width})")

    def pixel_series(self, row, col):
        return self.data[:, row, col]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class labels with a validity flag.

    Pixels loaded as invalid carry the sentinel label 255 and behave as
    their own class when boundaries are trimmed.
    """
    width: int
    height: int
    labels: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise IngestError("label shape does not match mask dimensions")
        if self.valid.shape != (self.height, self.width):
            raise IngestError("valid shape does not match mask dimensions")

    def class_count(self):
        if not self.valid.any():
            return 0
        return int(self.labels[self.valid].max()) + 1


# predictions share the mask structure
LabelMap = LabelMask


@dataclass(frozen=True)
class SequenceManifest:
    frame_paths: list = field(default_factory=list)
    timestamps: np.ndarray = None
    width: int = 0
    height: int = 0
    saturation_value: float = float("inf")
    units: str = "counts"


def _parse_keyvals(path):
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise IngestError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                pairs.append((key.strip(), value.strip()))
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    return pairs


def read_manifest(path):
    """Parse a manifest sidecar into a SequenceManifest."""
    pairs = _parse_keyvals(path)
    single = {}
    frames = []
    for key, value in pairs:
        if key == "frame":
            frames.append(value)
        else:
            single[key] = value
    try:
        width = int(single["width"])
        height = int(single["height"])
        saturation = float(single.get("saturation_value", "inf"))
    except KeyError as exc:
        raise IngestError(f"{path}: missing manifest key {exc}") from exc
    except ValueError as exc:
        raise IngestError(f"{path}: bad manifest value: {exc}") from exc
    if not frames:
        raise IngestError(f"{path}: no frame entries")

    if "timestamps" in single:
        try:
            stamps = np.array([float(v) for v in single["timestamps"].split()])
        except ValueError as exc:
            raise IngestError(f"{path}: bad timestamps: {exc}") from exc
    elif "fps" in single:
        fps = float(single["fps"])
        if fps <= 0:
            raise IngestError(f"{path}: fps must be positive")
        # first frame follows the flash by one frame interval, so t > 0
        stamps = (np.arange(len(frames)) + 1.0) / fps
    else:
        raise IngestError(f"{path}: need either timestamps or fps")
    if len(stamps) != len(frames):
        raise IngestError(f"{path}: {len(frames)} frames but "
                          f"{len(stamps)} timestamps")
    base = os.path.dirname(os.path.abspath(path))
    frames = [os.path.normpath(os.path.join(base, f)) for f in frames]
    return SequenceManifest(frames, stamps, width, height, saturation,
                            single.get("units", "counts"))


def _load_frame_csv(path):
    try:
        frame = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise IngestError(f"missing frame file {path}") from exc
    except ValueError as exc:
        raise IngestError(f"{path}: non-numeric cell: {exc}") from exc
    return frame


def load_sequence(manifest_path):
    """Load and validate the frame sequence described by a manifest."""
    man = read_manifest(manifest_path)
    data = np.empty((len(man.frame_paths), man.height, man.width))
    for i, fpath in enumerate(man.frame_paths):
        frame = _load_frame_csv(fpath)
        if frame.shape != (man.height, man.width):
            raise IngestError(
                f"{fpath}: frame is {frame.shape[1]}x{frame.shape[0]}, "
                f"manifest says {man.width}x{man.height}")
        data[i] = frame
    return FrameSequence(man.width, man.height, len(man.frame_paths),
                         man.timestamps, data, man.saturation_value, man.units)


def write_sequence(seq, out_dir, stem="frame"):
    """Write frame CSVs plus manifest under out_dir; returns manifest path.

    Cells are written with repr so a load round-trips bit exactly.
    """
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    names = []
    for i in range(seq.frame_count):
        name = f"{stem}_{i:05d}.csv"
        names.append(name)
        rows = seq.data[i]
        with open(os.path.join(frame_dir, name), "w", encoding="utf-8") as fh:
            for r in range(seq.height):
                fh.write(",".join(repr(float(v)) for v in rows[r]))
                fh.write("\n")
    manifest_path = os.path.join(out_dir, "manifest.txt")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(f"width = {seq.width}\n")
        fh.write(f"height = {seq.height}\n")
        fh.write(f"saturation_value = {repr(float(seq.saturation_value))}\n")
        fh.write(f"units = {seq.units}\n")
        fh.write("timestamps = "
                 + " ".join(repr(float(t)) for t in seq.timestamps) + "\n")
        for name in names:
            fh.write(f"frame = frames/{name}\n")
    return manifest_path


def crop(seq, x0, y0, width, height):
    """Crop every frame to the rectangle (x0, y0, width, height)."""
    if width < 1 or height < 1:
        raise IngestError("crop rectangle must have positive size")
    if x0 < 0 or y0 < 0 or x0 + width > seq.width or y0 + height > seq.height:
        raise IngestError(
            f"crop rect ({x0},{y0},{width},{height}) outside "
            f"{seq.width}x{seq.height} frame")
    data = seq.data[:, y0:y0 + height, x0:x0 + width].copy()
    return FrameSequence(width, height, seq.frame_count, seq.timestamps,
                         data, seq.saturation_value, seq.units)


def trim_mask(mask, margin):
    """Invalidate pixels within `margin` (Chebyshev) of a class boundary
    or the image edge.

    Labels are left untouched and the criterion depends only on them, so
    trimming is idempotent and never revalidates a pixel.
    """
    if margin < 0:
        raise IngestError("margin must be >= 0")
    if margin == 0:
        return LabelMask(mask.width, mask.height, mask.labels.copy(),
                         mask.valid.copy())
    height, width = mask.height, mask.width
    labels = mask.labels
    near_boundary = np.zeros((height, width), dtype=bool)
    for dy in range(-margin, margin + 1):
        for dx in range(-margin, margin + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, -dy), min(height, height - dy)
            xs0, xs1 = max(0, -dx), min(width, width - dx)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            shifted = labels[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
            near_boundary[ys0:ys1, xs0:xs1] |= shifted != labels[ys0:ys1, xs0:xs1]
    edge = np.ones((height, width), dtype=bool)
    if height > 2 * margin and width > 2 * margin:
        edge[margin:height - margin, margin:width - margin] = False
    valid = mask.valid & ~near_boundary & ~edge
    return LabelMask(width, height, labels.copy(), valid)


def first_unsaturated_frame(seq, pixel):
    """Smallest frame index from which (row, col) stays strictly below the
    saturation value for every later frame."""
    row, col = pixel
    if not (0 <= row < seq.height and 0 <= col < seq.width):
        raise IngestError(f"pixel {pixel} outside {seq.width}x{seq.height}")
    values = seq.data[:, row, col]
    saturated = np.nonzero(values >= seq.saturation_value)[0]
    start = 0 if saturated.size == 0 else int(saturated[-1]) + 1
    if start >= seq.frame_count:
        raise SaturatedPixelError(
            f"pixel {pixel} is saturated through the final frame")
    return start


def save_mask(mask, path):
    """Write a LabelMask as a PGM; invalid pixels become 255."""
    if mask.valid.all() and mask.labels.max(initial=0) >= INVALID_LABEL:
        raise IngestError("class ids >= 255 cannot be serialized")
    image = np.where(mask.valid, mask.labels, INVALID_LABEL).astype(np.uint8)
    write_pgm(path, image)


def load_mask(path):
    """Read a PGM mask; 255 pixels are invalid and keep the sentinel label."""
    image = read_pgm(path)
    height, width = image.shape
    valid = image != INVALID_LABEL
    return LabelMask(width, height, image.astype(np.int64), valid)
