"""Synthetic weakly-labelled images with planted lesions, Otsu cropping, and on-disk datasets.

Layout of a dataset directory::

    images/NNNN.pgm   8-bit grayscale (P5)
    masks/NNNN.pgm    lesion mask, positives only (0 / 255)
    labels.csv        filename,label,mask_filename
    genconfig.txt     key=value, includes the seed
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .imaging import atomic_write_bytes, atomic_write_text, decode_pgm, encode_pgm, resize_bilinear, to_u8


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float in [0, 1]
    label: int  # 1 = cancer
    mask: np.ndarray = None  # (H, W) bool, positives only
    name: str = ""

    @property
    def onehot(self):
        y = np.zeros(2)
        y[self.label] = 1.0
        return y


@dataclass
class Dataset:
    samples: list
    config: dict = None

    def __len__(self):
        return len(self.samples)

    @property
    def images(self):
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def masks(self):
        return [s.mask for s in self.samples]


@dataclass
class GenConfig:
    n_neg: int = 200
    n_pos: int = 200
    height: int = 64
    width: int = 64
    radius_min: float = 4.0
    radius_max: float = 7.0
    boost_min: float = 0.35
    boost_max: float = 0.5
    texture_scale: float = 10.0
    n_bumps: int = 6
    noise: float = 0.06
    seed: int = 0

    def validate(self):
        if self.n_neg < 1 or self.n_pos < 1:
            raise DatasetError("class counts must be >= 1")
        if self.height < 8 or self.width < 8:
            raise DatasetError("images must be at least 8x8")
        if not 0 < self.radius_min <= self.radius_max < min(self.height, self.width) / 2:
            raise DatasetError("lesion radius range must satisfy 0 < min <= max < min(H, W) / 2")
        if not 0 < self.boost_min <= self.boost_max:
            raise DatasetError("intensity boost range must be positive and ordered")
        if self.texture_scale <= 0 or self.noise < 0 or self.n_bumps < 0:
            raise DatasetError("texture scale must be positive; noise and bump count non-negative")

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key in kinds:
                values[key] = (int if kinds[key] in (int, "int") else float)(val.strip())
        return cls(**values)


def _tissue(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    cx = w / 2 + rng.uniform(-0.05, 0.05) * w
    ry = rng.uniform(0.36, 0.46) * h
    rx = rng.uniform(0.36, 0.46) * w
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0, (cy, cx, ry, rx)


def _background(rng, cfg, tissue):
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), rng.uniform(0.3, 0.4))
    for _ in range(cfg.n_bumps):
        sy, sx = rng.uniform(0.5, 1.5, size=2) * cfg.texture_scale
        by, bx = rng.uniform(0, h), rng.uniform(0, w)
        amp = rng.uniform(-0.1, 0.1)
        img += amp * np.exp(-0.5 * (((yy - by) / sy) ** 2 + ((xx - bx) / sx) ** 2))
    img += rng.uniform(-cfg.noise, cfg.noise, size=(h, w))
    return np.where(tissue, img, 0.0)


def _lesion(rng, cfg, geom):
    h, w = cfg.height, cfg.width
    cy, cx, ry, rx = geom
    a, b = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
    theta = rng.uniform(0, np.pi)
    # centre well inside the tissue ellipse so the lesion never leaves it
    while True:
        ly, lx = rng.uniform(-1, 1, size=2)
        if ly * ly + lx * lx <= 1:
            break
    margin = cfg.radius_max + 2
    ly = cy + ly * max(ry - margin, 0)
    lx = cx + lx * max(rx - margin, 0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - ly, xx - lx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate(config):
    """Deterministic synthetic dataset: negatives first, then positives."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    samples = []
    for i in range(config.n_neg + config.n_pos):
        label = int(i >= config.n_neg)
        tissue, geom = _tissue(rng, config.height, config.width)
        img = _background(rng, config, tissue)
        mask = None
        if label:
            mask = _lesion(rng, config, geom) & tissue
            img = img + mask * rng.uniform(config.boost_min, config.boost_max)
        img = to_u8(img).astype(np.float32) / 255.0
        samples.append(Sample(img, label, mask, name=f"{i:04d}.pgm"))
    return Dataset(samples, asdict(config))


# ---------------------------------------------------------------------------
# Otsu crop
# ---------------------------------------------------------------------------

@dataclass
class OtsuCrop:
    image: np.ndarray
    rect: tuple  # (row0, row1, col0, col1), half-open
    threshold_bin: int
    degenerate: bool

    @property
    def threshold(self):
        return self.threshold_bin / 255.0


def histogram_u8(image):
    bins = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.int64)
    return bins, np.bincount(bins.ravel(), minlength=256)


def otsu_threshold(hist):
    """Bin ``k`` maximising between-class variance of {<= k} vs {> k}; smallest k on ties.

    Exact integer arithmetic, so ties are real ties. Returns ``None`` when no
    split leaves both classes non-empty.
    """
    hist = [int(c) for c in hist]
    n = sum(hist)
    s = sum(i * c for i, c in enumerate(hist))
    n0 = s0 = 0
    best_k, best_num, best_den = None, -1, 1
    for k in range(255):
        n0 += hist[k]
        s0 += k * hist[k]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * n^2 = (s0*n1 - s1*n0)^2 / (n0*n1)
        num = (s0 * n1 - (s - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_crop(image, size=None):
    """Crop to the bounding box of pixels above the Otsu threshold, then resize bilinearly.

    A constant image has no threshold; it is returned whole with
    ``degenerate=True``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise DatasetError("otsu_crop on an empty image")
    size = tuple(size or image.shape)
    bins, hist = histogram_u8(image)
    k = otsu_threshold(hist)
    h, w = image.shape
    if k is None:
        return OtsuCrop(resize_bilinear(image, size), (0, h, 0, w), -1, True)
    fg = bins > k
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    rect = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    crop = image[rect[0] : rect[1], rect[2] : rect[3]]
    return OtsuCrop(resize_bilinear(crop, size), rect, int(k), False)


def prepare(dataset, size=None, crop=True):
    """Model-ready copy: Otsu crop + resize applied identically to image and mask."""
    out = []
    for s in dataset.samples:
        target = size or s.image.shape
        if crop:
            oc = otsu_crop(s.image, target)
            img, (r0, r1, c0, c1) = oc.image, oc.rect
        else:
            img, (r0, r1, c0, c1) = resize_bilinear(s.image, target), (0, s.image.shape[0], 0, s.image.shape[1])
        mask = None
        if s.mask is not None:
            mask = resize_bilinear(s.mask[r0:r1, c0:c1].astype(np.float64), target) >= 0.5
        out.append(Sample(np.clip(img, 0, 1).astype(np.float32), s.label, mask, s.name))
    return Dataset(out, dataset.config)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset, path):
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["filename", "label", "mask_filename"])
    has_masks = any(s.mask is not None for s in dataset.samples)
    if has_masks:
        (path / "masks").mkdir(exist_ok=True)
    for i, s in enumerate(dataset.samples):
        name = s.name or f"{i:04d}.pgm"
        atomic_write_bytes(path / "images" / name, encode_pgm(to_u8(s.image)))
        mask_name = ""
        if s.mask is not None:
            mask_name = name
            atomic_write_bytes(path / "masks" / name, encode_pgm(np.where(s.mask, 255, 0).astype(np.uint8)))
        writer.writerow([name, s.label, mask_name])
    atomic_write_text(path / "labels.csv", rows.getvalue())
    if dataset.config is not None:
        atomic_write_text(path / "genconfig.txt", "".join(f"{k}={v}\n" for k, v in dataset.config.items()))


def _read_pgm(path):
    try:
        payload = Path(path).read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found") from None
    return decode_pgm(payload, name=str(path))


def load_dataset(path, workers=1):
    """Read a dataset directory; errors name the offending file."""
    path = Path(path)
    labels_path = path / "labels.csv"
    if not labels_path.is_file():
        raise DatasetError(f"{labels_path}: labels file missing")
    text = labels_path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["filename", "label", "mask_filename"]:
        raise DatasetError(f"{labels_path}: bad header {header!r} at offset 0")
    entries = []
    offset = len(text.splitlines(keepends=True)[0])
    for line_no, row in enumerate(reader, start=2):
        if len(row) != 3 or row[1] not in ("0", "1"):
            raise DatasetError(f"{labels_path}: malformed row {row!r} at line {line_no} (offset {offset})")
        entries.append(row)
        offset += len(",".join(row)) + 1
    missing = [r[0] for r in entries if not (path / "images" / r[0]).is_file()]
    missing += [r[2] for r in entries if r[2] and not (path / "masks" / r[2]).is_file()]
    if missing:
        raise DatasetError(f"{labels_path}: referenced files absent: {', '.join(missing)}")

    def load(row):
        name, label, mask_name = row
        img = _read_pgm(path / "images" / name).astype(np.float32) / 255.0
        mask = None
        if mask_name:
            mask = _read_pgm(path / "masks" / mask_name) > 127
            if mask.shape != img.shape:
                raise DatasetError(f"{path / 'masks' / mask_name}: mask shape {mask.shape} != image {img.shape}")
        return Sample(img, int(label), mask, name)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(load, entries))
    else:
        samples = [load(r) for r in entries]
    config = None
    gc = path / "genconfig.txt"
    if gc.is_file():
        config = {}
        for line in gc.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                config[k.strip()] = v.strip()
    return Dataset(samples, config)
