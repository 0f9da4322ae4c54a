"""Binary PGM (P5) reading and writing for masks and segmentation maps."""

import numpy as np

from .errors import ValidationError


class PgmError(ValidationError):
    pass


def write_pgm(path, image, maxval=255):
    """Write a 2-D uint8 array as a binary P5 PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise PgmError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > maxval:
            raise PgmError("pixel values outside [0, maxval]")
        image = image.astype(np.uint8)
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    """Read a binary P5 PGM into a 2-D uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise PgmError(f"{path}: truncated PGM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise PgmError(f"{path}: unterminated comment")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise PgmError(f"{path}: 16-bit PGM not supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos:pos + width * height]
    if len(raster) != width * height:
        raise PgmError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
