"""Small raster helpers: bilinear resize, PGM/PPM I/O, colour overlays."""

import os
import tempfile

import numpy as np


def resize_bilinear(img, size):
    """Resize the two trailing axes of ``img`` to ``size`` (half-pixel centres, edge clamp).

    Output values are convex combinations of input values, so the range is preserved.
    """
    img = np.asarray(img)
    h, w = img.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.astype(np.float64, copy=True)

    def axis_weights(n_in, n_out):
        centres = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        centres = np.clip(centres, 0.0, n_in - 1)
        lo = np.floor(centres).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, centres - lo

    r0, r1, fr = axis_weights(h, oh)
    c0, c1, fc = axis_weights(w, ow)
    x = img.astype(np.float64)
    top = x[..., r0, :] * (1.0 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return top[..., c0] * (1.0 - fc) + top[..., c1] * fc


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` through a temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def to_u8(values):
    """Quantise [0, 1] floats to 0..255 with round-half-up."""
    return np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(u8):
    u8 = np.ascontiguousarray(u8, dtype=np.uint8)
    h, w = u8.shape
    return b"P5\n%d %d\n255\n" % (w, h) + u8.tobytes()


def encode_ppm(rgb_u8):
    rgb_u8 = np.ascontiguousarray(rgb_u8, dtype=np.uint8)
    h, w, _ = rgb_u8.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb_u8.tobytes()


class PGMError(ValueError):
    pass


def decode_pgm(payload, name="<bytes>"):
    """Parse a binary P5 PGM with maxval 255. Errors name the source and byte offset."""
    tokens = []
    pos = 0
    n = len(payload)
    while len(tokens) < 4:
        while pos < n and payload[pos : pos + 1].isspace():
            pos += 1
        if pos < n and payload[pos : pos + 1] == b"#":
            while pos < n and payload[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not payload[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{name}: truncated header at offset {pos}")
        tokens.append((payload[start:pos], start))
    magic, off = tokens[0]
    if magic != b"P5":
        raise PGMError(f"{name}: bad magic {magic!r} at offset {off}")
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise PGMError(f"{name}: non-integer header field near offset {tokens[1][1]}") from None
    if maxval != 255:
        raise PGMError(f"{name}: unsupported maxval {maxval} at offset {tokens[3][1]}")
    pos += 1  # single whitespace after maxval
    body = payload[pos:]
    if len(body) != w * h:
        raise PGMError(f"{name}: expected {w * h} pixel bytes at offset {pos}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def heat_overlay(gray, heat):
    """Blend a [0, 1] heat map (red) over a grayscale [0, 1] image; returns HxWx3 uint8."""
    g = np.clip(np.asarray(gray, dtype=np.float64), 0, 1)
    m = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)
    rgb = np.stack([g, g, g], axis=-1) * 0.5
    rgb[..., 0] += 0.5 * m
    rgb[..., 2] += 0.5 * (1 - m) * g
    return to_u8(rgb)


def line_plot(xs, ys, size=(200, 300), ylim=(0.0, 1.0)):
    """Rasterise a polyline on a white canvas with a light frame; returns HxWx3 uint8."""
    h, w = size
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    canvas[[0, -1], :] = 160
    canvas[:, [0, -1]] = 160
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0:
        return canvas
    x0, x1 = xs.min(), xs.max()
    span = (x1 - x0) or 1.0
    px = 10 + (xs - x0) / span * (w - 20)
    py = (h - 10) - (np.clip(ys, *ylim) - ylim[0]) / (ylim[1] - ylim[0]) * (h - 20)
    for a in range(len(xs) - 1):
        steps = int(max(abs(px[a + 1] - px[a]), abs(py[a + 1] - py[a]))) + 1
        for t in np.linspace(0.0, 1.0, steps + 1):
            c = int(round(px[a] + t * (px[a + 1] - px[a])))
            r = int(round(py[a] + t * (py[a + 1] - py[a])))
            canvas[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = (30, 60, 200)
    for c, r in zip(px, py):
        r, c = int(round(r)), int(round(c))
        canvas[max(r - 2, 0) : r + 3, max(c - 2, 0) : c + 3] = (200, 30, 30)
    return canvas
