"""Binary PPM (P6, maxval 255) image files.

Chosen so image round trips are bit-exact without any imaging dependency.
Arrays are [3,H,W] float in [0,1]; files store 8-bit RGB rows.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint8, round-half-away rounding."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected [3,H,W] image, got shape {arr.shape}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return q.transpose(1, 2, 0)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """[H,W,3] uint8 -> [3,H,W] float64 in [0,1]."""
    return raw.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_ppm(path, img: np.ndarray):
    q = to_uint8(img)
    h, w = q.shape[0], q.shape[1]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(q.tobytes())


def _read_token(f):
    # Tokens are separated by whitespace; '#' starts a comment to EOL.
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            if tok:
                return tok
            raise DataError("unexpected end of PPM header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into a [3,H,W] float64 array in [0,1]."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open image {path}: {e}") from None
    with f:
        magic = _read_token(f)
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError:
            raise DataError(f"{path}: malformed PPM header") from None
        if maxval != 255:
            raise DataError(f"{path}: unsupported maxval {maxval} (need 255)")
        if w < 1 or h < 1:
            raise DataError(f"{path}: bad dimensions {w}x{h}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataError(f"{path}: truncated pixel data ({len(raw)} of {w * h * 3} bytes)")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return from_uint8(arr)
