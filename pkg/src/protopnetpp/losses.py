"""Training objectives for the two-branch model.

All functions take and return :class:`~protopnetpp.diffcore.Tensor` values so
the composed objective can be differentiated end to end.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class HyperParams:
    alpha: float = 1.0
    beta: float = 0.5
    omega: float = 0.2
    lambda1: float = 0.1
    lambda2: float = 0.1
    gamma: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise dc.InvalidConfigError(f"{k} must be non-negative, got {v}")
        if not self.omega > 0 or not self.gamma > 0:
            raise dc.InvalidConfigError("omega and gamma must be strictly positive")


def label_index(y):
    """Class indices from one-hot rows (or pass-through for an int vector)."""
    y = np.asarray(y)
    if y.ndim == 1:
        if not np.isin(y, (0, 1)).all():
            raise ValueError(f"labels must be 0/1, got {np.unique(y)}")
        return y.astype(np.intp)
    if y.ndim != 2 or not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise ValueError("labels must be one-hot rows")
    return y.argmax(axis=1)


def ce_loss(probs, y, floor=1e-12):
    """Mean negative log-probability of the labelled class."""
    return dc.scale(dc.mean(dc.log_clamped(dc.pick(probs, label_index(y)), floor)), -1.0)


def kd_loss(global_probs, proto_probs, y, omega):
    """Hinge distillation: mean of ``max(0, teacher - student + omega)`` on the labelled class.

    The teacher (global branch) is a constant here.
    """
    if not omega > 0:
        raise dc.InvalidConfigError("omega must be positive")
    idx = label_index(y)
    teacher = dc.detach(dc.pick(global_probs, idx))
    student = dc.pick(proto_probs, idx)
    return dc.mean(dc.relu(teacher - student + omega))


def _class_min_distance(distances, classes, y, own):
    n, m, h, w = distances.shape
    idx = label_index(y)
    classes = np.asarray(classes)
    for c in np.unique(idx):
        if not np.any((classes == c) if own else (classes != c)):
            raise dc.InvalidConfigError(f"no {'own' if own else 'other'}-class prototypes for class {c}")
    same = classes[None, :] == idx[:, None]
    allowed = same if own else ~same
    allowed = np.repeat(allowed, h * w, axis=1)
    return dc.mean(dc.masked_min(dc.reshape(distances, (n, m * h * w)), allowed))


def cluster_loss(distances, classes, y):
    """Mean over images of the smallest squared distance to any own-class prototype."""
    return _class_min_distance(distances, classes, y, own=True)


def separation_loss(distances, classes, y):
    """Mean over images of the smallest squared distance to any other-class prototype."""
    return _class_min_distance(distances, classes, y, own=False)


@dataclass
class LossTerms:
    total: dc.Tensor
    ce_proto: dc.Tensor = None
    cluster: dc.Tensor = None
    separation: dc.Tensor = None
    ce_global: dc.Tensor = None
    kd: dc.Tensor = None

    def values(self):
        return {k: (None if v is None else float(v.data)) for k, v in vars(self).items()}


def compose_protopnet(ce_proto, cluster, separation, hp):
    return ce_proto + hp.lambda1 * cluster + hp.lambda2 * dc.relu(hp.gamma - separation)


def protopnet_loss(out, classes, y, hp):
    """Cross-entropy on the prototype branch plus cluster and hinged separation terms."""
    return _protopnet_terms(out, classes, y, hp).total


def _protopnet_terms(out, classes, y, hp):
    ce = ce_loss(out.proto_probs, y)
    ct = cluster_loss(out.distances, classes, y)
    sp = separation_loss(out.distances, classes, y)
    return LossTerms(compose_protopnet(ce, ct, sp, hp), ce, ct, sp)


def total_objective(out, classes, y, hp, terms=("ppn", "ceg", "kd")):
    """Weighted objective ``ppn + alpha * ce_global + beta * kd``.

    ``terms`` selects which parts are built (training stage 2 drops ``ceg``,
    whose parameters are frozen there); the returned :class:`LossTerms`
    exposes each component.
    """
    parts = _protopnet_terms(out, classes, y, hp) if "ppn" in terms else LossTerms(None)
    total = parts.total
    if "ceg" in terms:
        parts.ce_global = ce_loss(out.global_probs, y)
        term = hp.alpha * parts.ce_global
        total = term if total is None else total + term
    if "kd" in terms:
        parts.kd = kd_loss(out.global_probs, out.proto_probs, y, hp.omega)
        term = hp.beta * parts.kd
        total = term if total is None else total + term
    parts.total = total
    return parts
