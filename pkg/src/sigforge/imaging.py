"""Grayscale image I/O and the preprocessing chain.

Images are 2-D float64 numpy arrays of shape ``(height, width)`` with values
in [0, 1]. Raw "page" images are dark ink on a light background; the
preprocessing chain turns them into ink masks where 1 means ink.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

N_BINS = 256
CATMULL_ROM_A = -0.5


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class TruncatedFileError(ImageFormatError):
    pass


class ZeroDimensionError(ImageFormatError):
    pass


def check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.size == 0:
        raise ZeroDimensionError("image has a zero dimension")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image intensities must be finite and within [0, 1]")
    return arr


# --------------------------------------------------------------------- PGM / PNG


def _pgm_header(data: bytes):
    """Parse a binary PGM header; returns (width, height, maxval, payload offset)."""
    if data[:2] != b"P5":
        raise UnsupportedFormatError(f"not a binary PGM (magic {data[:2]!r})")
    fields = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedFileError("PGM header ends early")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise UnsupportedFormatError(f"bad PGM header field {data[start:pos]!r}") from None
    if pos >= n:
        raise TruncatedFileError("PGM header ends early")
    return fields[0], fields[1], fields[2], pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    width, height, maxval, offset = _pgm_header(data)
    if width <= 0 or height <= 0:
        raise ZeroDimensionError(f"PGM declares {width}x{height}")
    if not 0 < maxval < 65536:
        raise UnsupportedFormatError(f"PGM maxval {maxval} out of range")
    depth = 1 if maxval < 256 else 2
    need = width * height * depth
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedFileError(f"PGM payload holds {len(payload)} bytes, header declares {need}")
    dtype = np.uint8 if depth == 1 else ">u2"
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return np.clip(values.reshape(height, width) / maxval, 0.0, 1.0)


def encode_pgm(img, comment: str | None = None) -> bytes:
    arr = check_image(img)
    h, w = arr.shape
    header = b"P5\n"
    if comment:
        for line in comment.splitlines():
            header += b"# " + line.encode() + b"\n"
    header += f"{w} {h}\n255\n".encode()
    return header + np.rint(arr * 255.0).astype(np.uint8).tobytes()


def pgm_comments(data: bytes) -> list[str]:
    out = []
    _, _, _, end = _pgm_header(data)
    for line in data[:end].split(b"\n"):
        if line.startswith(b"#"):
            out.append(line[1:].strip().decode(errors="replace"))
    return out


def load_image(path) -> np.ndarray:
    """Read a PGM (P5) or, when Pillow is available, a PNG as a [0, 1] image."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return decode_pgm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - optional dependency
            raise UnsupportedFormatError("PNG input needs Pillow (pip install sigforge[png])") from None
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im.convert("I;16") if mode in ("I", "I;16") else im.convert("L"))
        if arr.size == 0:
            raise ZeroDimensionError(f"{path} has a zero dimension")
        maxval = 65535.0 if arr.dtype != np.uint8 else 255.0
        return arr.astype(np.float64) / maxval
    raise UnsupportedFormatError(f"{path}: unsupported image format")


def save_image(img, path, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_pgm(img, comment))


# --------------------------------------------------------------------- operations


def histogram_bins(img: np.ndarray) -> np.ndarray:
    """Bin index per pixel for 256 uniform bins over [0, 1]; 8-bit value j lands in bin j."""
    return np.minimum((img * N_BINS).astype(np.int64), N_BINS - 1)


def otsu_binarize(img) -> tuple[float, np.ndarray]:
    """Otsu threshold on a 256-bin histogram.

    Returns ``(threshold, ink)`` where ``ink`` is 1 for pixels in the dark
    class. When several cut points give the same between-class variance
    (empty bins between the two classes) the threshold sits in the middle of
    the gap. A constant image has no split: the threshold is the constant and
    no pixel is ink.
    """
    img = check_image(img)
    bins = histogram_bins(img)
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    total = hist.sum()
    levels = np.arange(N_BINS, dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return float(img.flat[0]), np.zeros_like(img)
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / w0
        m1 = (s0[-1] - s0) / w1
        between = np.where(valid, w0 * w1 * (m0 - m1) ** 2, -1.0)
    k_lo = int(np.argmax(between))
    k_hi = k_lo
    while k_hi + 1 < N_BINS and between[k_hi + 1] == between[k_lo]:
        k_hi += 1
    threshold = (k_lo + k_hi + 2) / (2.0 * N_BINS)
    ink = (bins <= k_lo).astype(np.float64)
    return float(threshold), ink


def median_denoise(img) -> np.ndarray:
    """3x3 median filter with edge replication."""
    img = check_image(img)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"median filter needs at least 3x3, got {w}x{h}")
    padded = np.pad(img, 1, mode="edge")
    stack = np.stack([padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
    return np.median(stack, axis=0)


def cubic_kernel(t, a: float = CATMULL_ROM_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr.copy()
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    taps = np.arange(-1, 3)
    idx = np.clip(base[:, None] + taps[None, :], 0, n_in - 1)
    weights = cubic_kernel(frac[:, None] - taps[None, :])
    moved = np.moveaxis(arr, axis, 0)
    # anchor on the nearest tap so that constant rows stay bit-exact
    anchor = moved[idx[:, 1]]
    gathered = moved[idx] - anchor[:, None]
    out = anchor + np.einsum("ok,ok...->o...", weights, gathered)
    return np.moveaxis(out, 0, axis)


def resize_bicubic(img, out_w: int, out_h: int) -> np.ndarray:
    """Catmull-Rom bicubic resize with edge replication, clamped to [0, 1]."""
    img = check_image(img)
    if out_w < 1 or out_h < 1:
        raise ZeroDimensionError(f"target size {out_w}x{out_h} has a zero dimension")
    if img.shape == (out_h, out_w):
        return img.copy()
    out = _resize_axis(_resize_axis(img, out_h, 0), out_w, 1)
    return np.clip(out, 0.0, 1.0)


def preprocess(img, target_size: int | tuple[int, int] = 64) -> np.ndarray:
    """Page image -> denoised, binarized (1 = ink), resized, clamped."""
    w, h = (target_size, target_size) if isinstance(target_size, int) else target_size
    _, ink = otsu_binarize(median_denoise(img))
    return np.clip(resize_bicubic(ink, w, h), 0.0, 1.0)


def to_page(ink) -> np.ndarray:
    """Ink-domain image (1 = ink) back to page polarity (dark ink, light page)."""
    return 1.0 - check_image(ink)


def random_signature(w: int, h: int, seed: int) -> np.ndarray:
    """Independent fair coin per pixel, values exactly 0 or 1."""
    if w < 1 or h < 1:
        raise ZeroDimensionError(f"size {w}x{h} has a zero dimension")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(h, w)).astype(np.float64)
