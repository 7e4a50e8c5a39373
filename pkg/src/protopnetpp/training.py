"""Three-stage schedule: (1) backbone + GlobalNet, (2) prototype branch with the
backbone and GlobalNet frozen, (3) everything. Prototypes are pushed after
every epoch of stages 2 and 3.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .evaluation import roc_auc_or_nan
from .losses import HyperParams, total_objective
from .model import BackboneConfig, build_model, checkpoint_bytes, forward
from .prototypes import push_prototypes

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite. ``last_good`` holds the checkpoint bytes before the bad step."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class AugmentConfig:
    translate: float = 4.0  # pixels
    rotate: float = 10.0  # degrees
    scale: float = 0.1  # relative

    def is_identity(self):
        return self.translate == 0 and self.rotate == 0 and self.scale == 0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    epochs: tuple = (10, 10, 5)
    hyper: HyperParams = field(default_factory=HyperParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    push_every: int = 1
    greedy: bool = True
    n_prototypes: int = 10
    temperature: float = None
    channels: tuple = (16, 32, 32)

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.epochs) != 3 or min(self.epochs) < 1:
            raise dc.InvalidConfigError("each of the three stages needs at least one epoch")
        if not (self.lr > 0 and self.batch_size > 0 and self.push_every > 0 and self.weight_decay >= 0):
            raise dc.InvalidConfigError("learning rate, batch size and push frequency must be positive")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Parameters without a gradient are left untouched.
    """
    state.t += 1
    t = state.t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise dc.NumericError(f"non-finite gradient in {p.name} ({bad} entries) at step {t}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        value = p.data.astype(np.float64)
        if weight_decay:
            value = value - lr * weight_decay * value
        value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data[...] = value.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(image, config, rng, mask=None):
    """Random translation / rotation / scaling about the image centre.

    Bilinear resampling with zero fill; the mask (if given) gets the same
    transform. With every range at zero the input comes back unchanged and
    no random numbers are drawn.
    """
    if config.is_identity():
        return (image, mask) if mask is not None else image
    ty, tx = rng.uniform(-config.translate, config.translate, size=2)
    angle = np.deg2rad(rng.uniform(-config.rotate, config.rotate))
    s = rng.uniform(1 - config.scale, 1 + config.scale)
    c, si = np.cos(angle), np.sin(angle)
    # maps output coordinates to input coordinates
    inv = np.array([[c, si], [-si, c]]) / s
    centre = (np.array(image.shape, dtype=np.float64) - 1) / 2
    offset = centre - inv @ (centre + np.array([ty, tx]))
    out = ndimage.affine_transform(image.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0)
    out = np.clip(out, 0, 1).astype(image.dtype)
    if mask is None:
        return out
    warped = ndimage.affine_transform(mask.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0)
    return out, warped >= 0.5


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

STAGE_GROUPS = {
    1: ("backbone", "global_head"),
    2: ("prototypes", "fc_head"),
    3: ("backbone", "global_head", "prototypes", "fc_head"),
}
STAGE_TERMS = {1: ("ceg",), 2: ("ppn", "kd"), 3: ("ppn", "ceg", "kd")}


def _set_stage(state, stage):
    state.unfreeze_all()
    frozen = [g for g in ("backbone", "global_head", "prototypes", "fc_head") if g not in STAGE_GROUPS[stage]]
    if frozen:
        state.freeze(*frozen)


def run_stage(stage, state, images, labels, config, rng, epochs=None, epoch_offset=0, on_epoch=None):
    """Train one stage in place; returns a list of per-epoch history rows."""
    if stage not in STAGE_GROUPS:
        raise dc.InvalidConfigError(f"stage must be 1, 2 or 3, got {stage}")
    epochs = config.epochs[stage - 1] if epochs is None else epochs
    _set_stage(state, stage)
    terms = STAGE_TERMS[stage]
    params = state.trainable()
    opt = AdamState()
    n = len(images)
    onehot = np.eye(2)[labels]
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        sums = {}
        batches = 0
        seen_g, seen_l, seen_y = [], [], []
        last_good = state.snapshot()
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack([augment(images[i], config.augment, rng) for i in idx])
            out = forward(state, batch, with_prototypes=stage != 1)
            parts = total_objective(out, state.prototypes.classes, onehot[idx], config.hyper, terms=terms)
            loss = float(parts.total.data)
            if not np.isfinite(loss):
                state.restore(last_good)
                raise TrainingDiverged(f"non-finite loss in stage {stage}, epoch {epoch}", checkpoint_bytes(state))
            for p in params:
                p.zero_grad()
            parts.total.backward()
            try:
                adam_step(params, opt, config.lr, config.weight_decay)
            except dc.NumericError as exc:
                state.restore(last_good)
                raise TrainingDiverged(str(exc), checkpoint_bytes(state)) from exc
            for k, v in parts.values().items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            batches += 1
            seen_g.append(out.global_probs.data[:, 1])
            if out.proto_probs is not None:
                seen_l.append(out.proto_probs.data[:, 1])
            seen_y.append(labels[idx])
        pushed = False
        if stage in (2, 3) and epoch % config.push_every == 0:
            push_prototypes(state, images, labels, greedy=config.greedy)
            pushed = True
        y = np.concatenate(seen_y)
        g = np.concatenate(seen_g)
        row = {"epoch": epoch_offset + epoch, "stage": stage, "stage_epoch": epoch}
        row.update({k: v / batches for k, v in sums.items()})
        row["auc_global"] = roc_auc_or_nan(g, y)
        if seen_l:
            lp = np.concatenate(seen_l)
            row["auc_proto"] = roc_auc_or_nan(lp, y)
            row["auc_ensemble"] = roc_auc_or_nan((g + lp) / 2, y)
        row["pushed"] = pushed
        history.append(row)
        log.info("stage %d epoch %d loss %.4f", stage, epoch, row["total"])
        if on_epoch is not None:
            on_epoch(row)
    state.unfreeze_all()
    return history


@dataclass
class TrainResult:
    state: object
    history: list
    checkpoints: dict  # stage -> bytes


def train(images, labels, config=None, on_epoch=None):
    """Stages 1 -> 2 -> 3 from a fresh model, with a final push before returning.

    ``images`` is an (N, H, W) float array; masks are never consulted.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise dc.InvalidConfigError("training data must contain both classes")
    h, w = images.shape[1:]
    state = build_model(BackboneConfig(h, w, config.channels), config.n_prototypes, config.temperature, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    history, checkpoints, offset = [], {}, 0
    for stage in (1, 2, 3):
        rows = run_stage(stage, state, images, labels, config, rng, epoch_offset=offset, on_epoch=on_epoch)
        offset += len(rows)
        history.extend(rows)
        if stage == 3:
            push_prototypes(state, images, labels, greedy=config.greedy)
        checkpoints[stage] = checkpoint_bytes(state)
    return TrainResult(state, history, checkpoints)
