"""Registered finite-difference checks on a toy model (8x8 inputs, D = 4, M = 4).

Runs in 64-bit so central differences with step 1e-3 resolve the small
derivatives; the code path is the same one training uses.
"""

import numpy as np

from . import diffcore as dc
from .losses import HyperParams, ce_loss, cluster_loss, kd_loss, protopnet_loss, separation_loss, total_objective
from .model import BackboneConfig, build_model, forward

TOY = BackboneConfig(height=8, width=8, channels=(2, 4))


def toy_problem(seed, n_prototypes=4):
    """Toy model plus a 2-sample batch (one per class)."""
    state = build_model(TOY, n_prototypes=n_prototypes, seed=seed)
    rng = np.random.default_rng([seed, 99])
    # prototypes near the feature scale so cluster/separation terms are active
    state.prototypes.vectors.data[...] = rng.uniform(0.0, 0.5, state.prototypes.vectors.shape)
    state.fc_head[1].data[...] = rng.normal(0.0, 0.1, 2)
    x = rng.uniform(0.0, 1.0, (2, 8, 8))
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    return state, x, y


def _groups(state, names):
    return [p for g in names for p in state.group(g)]


PROTO_GROUPS = ("backbone", "prototypes", "fc_head")
ALL_GROUPS = ("backbone", "global_head", "prototypes", "fc_head")


def _loss_check(build, groups):
    def run(seed, step):
        state, x, y = toy_problem(seed)
        hp = HyperParams()
        classes = state.prototypes.classes

        def f():
            return build(forward(state, x), classes, y, hp)

        return dc.check_gradients(f, _groups(state, groups), step=step, seed=seed)

    return run


def _op_check(make):
    def run(seed, step):
        rng = np.random.default_rng([seed, 7])
        f, params = make(rng)
        return dc.check_gradients(f, params, step=step, seed=seed)

    return run


def _conv(rng):
    x = dc.Param("x", rng.normal(size=(1, 2, 5, 5)))
    k = dc.Param("k", rng.normal(size=(3, 2, 3, 3)))
    b = dc.Param("b", rng.normal(size=3))
    w = rng.normal(size=(3, 3, 3))
    return (lambda: dc.total(dc.mul(dc.conv2d(x, k, b, stride=2, padding=1), dc.Tensor(w)))), [x, k, b]


def _dense(rng):
    x = dc.Param("x", rng.normal(size=(2, 3)))
    w = dc.Param("w", rng.normal(size=(3, 2)))
    b = dc.Param("b", rng.normal(size=2))
    c = rng.normal(size=(2, 2))
    return (lambda: dc.total(dc.mul(dc.dense(x, w, b), dc.Tensor(c)))), [x, w, b]


def _softmax(rng):
    x = dc.Param("x", rng.normal(size=(3, 4)))
    c = rng.normal(size=(3, 4))
    return (lambda: dc.total(dc.mul(dc.softmax(x), dc.Tensor(c)))), [x]


def _sqdist_sim_max(rng):
    feats = dc.Param("features", rng.normal(size=(2, 3, 3, 3)))
    proto = dc.Param("prototype", rng.normal(size=3))
    c = rng.normal(size=2)

    def f():
        m = dc.exp_sim(dc.sqdist_map(feats, proto), 3.0)
        v, _ = dc.spatial_max(m)
        return dc.total(dc.mul(v, dc.Tensor(c)))

    return f, [feats, proto]


CHECKS = {
    "conv2d": _op_check(_conv),
    "dense": _op_check(_dense),
    "softmax": _op_check(_softmax),
    "sqdist+exp_sim+spatial_max": _op_check(_sqdist_sim_max),
    "ce_global": _loss_check(lambda out, cl, y, hp: ce_loss(out.global_probs, y), ("backbone", "global_head")),
    "ce_protopnet": _loss_check(lambda out, cl, y, hp: ce_loss(out.proto_probs, y), PROTO_GROUPS),
    "cluster": _loss_check(lambda out, cl, y, hp: cluster_loss(out.distances, cl, y), ("backbone", "prototypes")),
    "separation": _loss_check(lambda out, cl, y, hp: separation_loss(out.distances, cl, y), ("backbone", "prototypes")),
    "kd": _loss_check(lambda out, cl, y, hp: kd_loss(out.global_probs, out.proto_probs, y, hp.omega), ALL_GROUPS),
    "protopnet": _loss_check(protopnet_loss, PROTO_GROUPS),
    "total": _loss_check(lambda out, cl, y, hp: total_objective(out, cl, y, hp).total, ALL_GROUPS),
}


def run_check(name, trials=20, step=1e-3, seed=0):
    """Worst result over ``trials`` seeded trials of one registered check."""
    worst = None
    with dc.precision(np.float64):
        for t in range(trials):
            r = CHECKS[name](seed * 1000 + t, step)
            if worst is None or r.max_rel_error > worst.max_rel_error:
                worst = r
    return worst


def run_gradchecks(trials=20, tolerance=1e-3, step=1e-3, seed=0, names=None):
    lines, ok = [], True
    for name in names or CHECKS:
        r = run_check(name, trials, step, seed)
        passed = r.max_rel_error <= tolerance and r.checked > 0
        ok &= passed
        lines.append(
            f"{'PASS' if passed else 'FAIL'} {name:<28} max_rel_err={r.max_rel_error:.3e} "
            f"checked={r.checked} kinked={r.kinked} retried={r.retried}"
        )
    return lines, ok
