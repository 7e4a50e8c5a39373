"""Prototype push with greedy distinct-image selection, and diversity metrics."""

import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import Provenance, extract_features


class InsufficientImagesError(ValueError):
    pass


class UndefinedCosineError(ValueError):
    pass


@dataclass
class TableEntry:
    image: int
    row: int
    col: int
    distance: float


@dataclass
class DistanceTable:
    """For each prototype, its same-class images sorted by nearest-patch distance."""

    classes: np.ndarray
    rows: list  # rows[m] -> list[TableEntry], ascending distance

    def __len__(self):
        return len(self.rows)


def build_distance_table(prototypes, classes, features, labels):
    """Nearest-patch squared distance from each prototype to every same-class image.

    ``features`` is ``(N, D, h, w)``; the per-image distance is the minimum over
    positions (first row-major position on ties). Rows are sorted by distance,
    then image index.
    """
    prototypes = np.asarray(prototypes)
    classes = np.asarray(classes)
    labels = np.asarray(labels)
    n, _, h, w = features.shape
    for c in np.unique(classes):
        if not np.any(labels == c):
            raise InsufficientImagesError(f"no training images of class {c}")
    dist = kernels.pairwise_sqdist(features, prototypes).reshape(n, len(prototypes), h * w)
    arg = dist.argmin(axis=2)
    best = np.take_along_axis(dist, arg[:, :, None], axis=2)[:, :, 0]
    rows = []
    for m, c in enumerate(classes):
        members = np.flatnonzero(labels == c)
        d = best[members, m]
        order = np.lexsort((members, d))
        rows.append(
            [TableEntry(int(members[j]), int(arg[members[j], m] // w), int(arg[members[j], m] % w), float(d[j])) for j in order]
        )
    return DistanceTable(classes, rows)


def greedy_assign(table):
    """Walk prototypes in index order; each takes its nearest image no earlier prototype used.

    Returns one :class:`TableEntry` per prototype. Raises
    :class:`InsufficientImagesError` instead of ever reusing an image.
    """
    used = set()
    chosen = []
    for m, row in enumerate(table.rows):
        pick = next((e for e in row if e.image not in used), None)
        if pick is None:
            raise InsufficientImagesError(
                f"prototype {m} (class {int(table.classes[m])}): all {len(row)} candidate images already used"
            )
        used.add(pick.image)
        chosen.append(pick)
    return chosen


def nearest_assign(table):
    """Unconstrained push: every prototype takes its own nearest image (images may repeat)."""
    if any(not row for row in table.rows):
        raise InsufficientImagesError("a prototype has no candidate images")
    return [row[0] for row in table.rows]


def push_prototypes(state, images, labels, greedy=True, features=None):
    """Replace each prototype by a real feature vector from a same-class training image.

    Copies the vector exactly and records provenance. ``greedy=False`` gives
    the plain nearest-patch push, in which images may repeat.
    """
    if features is None:
        features = extract_features(state, images)
    protos = state.prototypes
    table = build_distance_table(protos.vectors.data, protos.classes, features, labels)
    chosen = greedy_assign(table) if greedy else nearest_assign(table)
    for m, e in enumerate(chosen):
        protos.vectors.data[m] = features[e.image, :, e.row, e.col]
    # distances round-trip through the float32 checkpoint field
    protos.provenance = [Provenance(e.image, e.row, e.col, float(np.float32(e.distance))) for e in chosen]
    return table, chosen


def provenance_table(state, delimiter=","):
    """Delimited text: prototype id, class, image index, row, col, distance."""
    protos = state.prototypes
    buf = io.StringIO()
    buf.write(delimiter.join(["prototype", "class", "image", "row", "col", "distance"]) + "\n")
    for m, rec in enumerate(protos.provenance or []):
        fields = [m, int(protos.classes[m]), rec.image, rec.row, rec.col, f"{rec.distance:.9g}"]
        buf.write(delimiter.join(str(f) for f in fields) + "\n")
    return buf.getvalue()


def diversity_metrics(vectors, classes):
    """Per class: mean pairwise cosine distance and mean pairwise L2 distance.

    Returns ``{class: (cosine, l2)}`` over all unordered same-class pairs.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    classes = np.asarray(classes)
    out = {}
    for c in np.unique(classes):
        v = vectors[classes == c]
        if len(v) < 2:
            raise ValueError(f"class {c} needs at least two prototypes")
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0):
            raise UndefinedCosineError(f"class {c} has a zero-vector prototype; cosine distance undefined")
        i, j = np.triu_indices(len(v), k=1)
        unit = v / norms[:, None]
        # 1 - cos(u, v) == |u/|u| - v/|v||^2 / 2, without cancellation for near-equal vectors
        cos_dist = 0.5 * np.sum((unit[i] - unit[j]) ** 2, axis=1)
        l2 = np.linalg.norm(v[i] - v[j], axis=1)
        out[int(c)] = (float(np.mean(cos_dist)), float(np.mean(l2)))
    return out


CLASS_NAMES = {0: "Non-cancer", 1: "Cancer"}


def format_diversity_table(rows):
    """Render ``{method: {class: (cos, l2)}}`` in the cosine / L2 two-by-two layout."""
    lines = [
        f"{'Methods':<36} | {'Cosine distance':^21} | {'L2 distance':^21}",
        f"{'':<36} | {'Non-cancer':>10} {'Cancer':>10} | {'Non-cancer':>10} {'Cancer':>10}",
    ]
    for method, per_class in rows.items():
        cos = [per_class[c][0] for c in (0, 1)]
        l2 = [per_class[c][1] for c in (0, 1)]
        lines.append(f"{method:<36} | {cos[0]:>10.3f} {cos[1]:>10.3f} | {l2[0]:>10.3f} {l2[1]:>10.3f}")
    return "\n".join(lines) + "\n"
