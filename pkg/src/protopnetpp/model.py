"""Shared backbone, GlobalNet head, prototype layer and ProtoPNet head.

The global branch pools the backbone features and classifies them directly.
The prototype branch compares every spatial feature vector with M learned
prototypes, max-pools the similarity maps into M scores, and maps the scores
to two logits. At test time the two probability outputs are averaged.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .imaging import atomic_write_bytes, resize_bilinear

CHECKPOINT_MAGIC = b"BPPN"
CHECKPOINT_VERSION = 1

GROUPS = ("backbone", "global_head", "prototypes", "fc_head")


class MissingProvenanceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 64
    width: int = 64
    channels: tuple = (16, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise dc.InvalidConfigError(f"channels must be positive, got {self.channels}")
        s = self.downsample
        if self.height % s or self.width % s:
            raise dc.InvalidConfigError(f"input {self.height}x{self.width} not divisible by downsample {s}")

    @property
    def downsample(self):
        return 2 ** len(self.channels)

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def feature_size(self):
        return self.height // self.downsample, self.width // self.downsample


@dataclass
class Provenance:
    image: int
    row: int
    col: int
    distance: float


@dataclass
class PrototypeSet:
    vectors: dc.Param
    classes: np.ndarray
    temperature: float
    provenance: list = None

    @property
    def count(self):
        return self.vectors.shape[0]

    def of_class(self, c):
        return np.flatnonzero(self.classes == c)


@dataclass
class ModelState:
    config: BackboneConfig
    backbone: list
    global_head: list
    prototypes: PrototypeSet
    fc_head: list
    frozen: dict = field(default_factory=lambda: {g: False for g in GROUPS})

    def group(self, name):
        if name == "prototypes":
            return [self.prototypes.vectors]
        return list(getattr(self, name))

    def params(self):
        return [p for g in GROUPS for p in self.group(g)]

    def trainable(self):
        return [p for g in GROUPS if not self.frozen[g] for p in self.group(g)]

    def freeze(self, *groups, frozen=True):
        for g in groups:
            if g not in self.frozen:
                raise KeyError(g)
            self.frozen[g] = frozen
            for p in self.group(g):
                p.requires_grad = not frozen

    def unfreeze_all(self):
        self.freeze(*GROUPS, frozen=False)

    def snapshot(self):
        return {p.name: p.data.copy() for p in self.params()}

    def restore(self, snap):
        for p in self.params():
            p.data[...] = snap[p.name]


@dataclass
class Prediction:
    """Per-image outputs of both branches and the ensemble (numpy arrays)."""

    global_probs: np.ndarray
    proto_probs: np.ndarray
    ensemble_probs: np.ndarray
    scores: np.ndarray
    maps: np.ndarray


@dataclass
class Forward:
    features: dc.Tensor
    distances: dc.Tensor
    similarities: dc.Tensor
    scores: dc.Tensor
    score_positions: np.ndarray
    global_probs: dc.Tensor
    proto_probs: dc.Tensor


def fc_init(classes, n_classes=2):
    """+1 from a prototype to its own class, -0.5 to the other."""
    w = np.full((len(classes), n_classes), -0.5)
    w[np.arange(len(classes)), classes] = 1.0
    return w


def build_model(config=None, n_prototypes=10, temperature=None, seed=0):
    """Fresh model with He-initialised convolutions and uniform [0, 1) prototypes."""
    config = config or BackboneConfig()
    if n_prototypes < 2 or n_prototypes % 2:
        raise dc.InvalidConfigError(f"prototype count must be even and >= 2, got {n_prototypes}")
    d = config.feature_dim
    temperature = float(d if temperature is None else temperature)
    if not temperature > 0:
        raise dc.InvalidConfigError("temperature must be positive")
    rng = np.random.default_rng([seed, 0])
    backbone = []
    cin = 1
    for s, c in enumerate(config.channels):
        for tag, fan_in_ch in (("a", cin), ("b", c)):
            std = np.sqrt(2.0 / (fan_in_ch * 9))
            backbone.append(dc.Param(f"backbone.{s}.conv_{tag}.weight", rng.normal(0.0, std, (c, fan_in_ch, 3, 3))))
            backbone.append(dc.Param(f"backbone.{s}.conv_{tag}.bias", np.zeros(c)))
        cin = c
    global_head = [
        dc.Param("global_head.weight", rng.normal(0.0, 0.1, (d, 2))),
        dc.Param("global_head.bias", np.zeros(2)),
    ]
    classes = np.repeat([0, 1], n_prototypes // 2)
    protos = PrototypeSet(dc.Param("prototypes.vectors", rng.uniform(0.0, 1.0, (n_prototypes, d))), classes, temperature)
    fc_head = [dc.Param("fc_head.weight", fc_init(classes)), dc.Param("fc_head.bias", np.zeros(2))]
    return ModelState(config, backbone, global_head, protos, fc_head)


def as_input(images):
    """Stack grayscale images (N, H, W) or (H, W) into an (N, 1, H, W) tensor."""
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return dc.Tensor(x)


def backbone_forward(state, x):
    cfg = state.config
    if x.data.ndim != 4 or x.shape[1:] != (1, cfg.height, cfg.width):
        raise dc.InvalidShapeError(f"expected input (N, 1, {cfg.height}, {cfg.width}), got {x.shape}")
    h = x
    params = state.backbone
    for s in range(len(cfg.channels)):
        wa, ba, wb, bb = params[4 * s : 4 * s + 4]
        h = dc.relu(dc.conv2d(h, wa, ba, stride=1, padding=1))
        h = dc.relu(dc.conv2d(h, wb, bb, stride=2, padding=1))
    return h


def global_head(state, features):
    w, b = state.global_head
    return dc.softmax(dc.dense(dc.global_avg_pool(features), w, b))


def prototype_layer(state, features):
    """Similarity maps ``[N, M, h, w]``, distances, max-pooled scores and their positions."""
    protos = state.prototypes
    dist = dc.sqdist_maps(features, protos.vectors)
    sims = dc.exp_sim(dist, protos.temperature)
    scores, pos = dc.spatial_max(sims)
    return scores, sims, dist, pos


def protopnet_head(state, scores):
    w, b = state.fc_head
    return dc.softmax(dc.dense(scores, w, b))


def ensemble_predict(global_probs, proto_probs):
    return (np.asarray(global_probs, dtype=np.float64) + np.asarray(proto_probs, dtype=np.float64)) / 2.0


def forward(state, x, with_prototypes=True):
    if not isinstance(x, dc.Tensor):
        x = as_input(x)
    feats = backbone_forward(state, x)
    g = global_head(state, feats)
    if not with_prototypes:
        return Forward(feats, None, None, None, None, g, None)
    scores, sims, dist, pos = prototype_layer(state, feats)
    return Forward(feats, dist, sims, scores, pos, g, protopnet_head(state, scores))


def predict(state, images, batch_size=32):
    """Inference over a stack of images; gradients are never tracked."""
    images = np.asarray(images)
    saved = [(p, p.requires_grad) for p in state.params()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        parts = []
        for start in range(0, len(images), batch_size):
            out = forward(state, images[start : start + batch_size])
            parts.append((out.global_probs.data, out.proto_probs.data, out.scores.data, out.similarities.data))
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    g, l, s, m = (np.concatenate(cols) for cols in zip(*parts))
    return Prediction(g, l, ensemble_predict(g, l), s, m)


def extract_features(state, images, batch_size=32):
    """Backbone feature maps ``(N, D, h, w)`` without gradient tracking."""
    images = np.asarray(images)
    saved = [(p, p.requires_grad) for p in state.backbone]
    for p, _ in saved:
        p.requires_grad = False
    try:
        return np.concatenate(
            [backbone_forward(state, as_input(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
        )
    finally:
        for p, flag in saved:
            p.requires_grad = flag


@dataclass
class ExplanationItem:
    prototype: int
    cls: int
    score: float
    similarity_map: np.ndarray
    provenance: Provenance


@dataclass
class Explanation:
    overall: list
    by_class: dict
    prediction: Prediction


def explain(state, image, k=2):
    """Top-k prototypes by max-pooled similarity, overall and per class.

    Similarity maps are upsampled bilinearly to the input resolution.
    """
    if k < 1:
        raise dc.InvalidConfigError("k must be positive")
    protos = state.prototypes
    if not protos.provenance:
        raise MissingProvenanceError("prototypes have not been pushed yet; no provenance to explain with")
    pred = predict(state, np.asarray(image)[None])
    scores = pred.scores[0]
    size = (state.config.height, state.config.width)

    def item(m):
        up = np.clip(resize_bilinear(pred.maps[0, m], size), 0.0, 1.0)
        return ExplanationItem(int(m), int(protos.classes[m]), float(scores[m]), up, protos.provenance[m])

    order = np.argsort(-scores.astype(np.float64), kind="stable")
    overall = [item(m) for m in order[:k]]
    by_class = {}
    for c in (0, 1):
        members = [m for m in order if protos.classes[m] == c]
        by_class[c] = [item(m) for m in members[:k]]
    return Explanation(overall, by_class, pred)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _entries(state):
    cfg = state.config
    protos = state.prototypes
    yield "meta.input_size", np.array([cfg.height, cfg.width])
    yield "meta.temperature", np.array(protos.temperature)
    yield "meta.prototype_class", protos.classes
    for p in state.params():
        yield p.name, p.data


def checkpoint_bytes(state):
    entries = list(_entries(state))
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    prov = state.prototypes.provenance or []
    out.append(struct.pack("<I", len(prov)))
    for rec in prov:
        out.append(struct.pack("<iiif", rec.image, rec.row, rec.col, rec.distance))
    return b"".join(out)


def save_checkpoint(state, path):
    atomic_write_bytes(path, checkpoint_bytes(state))


def checkpoint_from_bytes(payload, name="<bytes>"):
    view = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"{name}: truncated at offset {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{name}: bad magic at offset 0")
    pos = 4
    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{name}: unsupported version {version} at offset 4")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        raw = bytes(view[pos : pos + nlen])
        if len(raw) != nlen:
            raise CheckpointError(f"{name}: truncated name at offset {pos}")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(view):
            raise CheckpointError(f"{name}: truncated data for {raw.decode()!r} at offset {pos}")
        arrays[raw.decode("utf-8")] = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    (nprov,) = take("<I")
    provenance = [Provenance(*take("<iiif")) for _ in range(nprov)]
    if pos != len(view):
        raise CheckpointError(f"{name}: {len(view) - pos} trailing bytes at offset {pos}")
    return _state_from_arrays(arrays, provenance or None, name)


def _state_from_arrays(arrays, provenance, name):
    try:
        h, w = (int(v) for v in arrays["meta.input_size"])
        temperature = float(arrays["meta.temperature"])
        classes = arrays["meta.prototype_class"].astype(np.int64)
        channels = []
        s = 0
        while f"backbone.{s}.conv_a.weight" in arrays:
            channels.append(arrays[f"backbone.{s}.conv_a.weight"].shape[0])
            s += 1
        state = build_model(BackboneConfig(h, w, tuple(channels)), len(classes), temperature)
        state.prototypes.temperature = temperature
        state.prototypes.classes = classes
        for p in state.params():
            if arrays[p.name].shape != p.shape:
                raise CheckpointError(f"{name}: entry {p.name!r} has shape {arrays[p.name].shape}, expected {p.shape}")
            p.data = arrays[p.name].astype(dc.default_dtype())
    except KeyError as exc:
        raise CheckpointError(f"{name}: missing entry {exc.args[0]!r}") from None
    state.prototypes.provenance = provenance
    return state


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), name=str(path))
