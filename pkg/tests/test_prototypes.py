import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protopnetpp.model import BackboneConfig, build_model, extract_features
from protopnetpp.prototypes import (
    InsufficientImagesError,
    UndefinedCosineError,
    build_distance_table,
    diversity_metrics,
    format_diversity_table,
    greedy_assign,
    nearest_assign,
    provenance_table,
    push_prototypes,
)

from .oracles import best_injection_cost, greedy_trace, random_class_table, table_from_matrix


# greedy ---------------------------------------------------------------------

def test_greedy_worked_example():
    # images A, B, C = 0, 1, 2
    d = np.array([[0.1, 0.2, 0.3], [0.05, 0.5, 0.6], [0.07, 0.09, 0.4]])
    chosen = greedy_assign(table_from_matrix(d))
    assert [e.image for e in chosen] == [0, 1, 2]
    assert [e.distance for e in chosen] == [0.1, 0.5, 0.4]


def test_greedy_one_prototype_per_class_takes_nearest():
    d = np.array([[0.3, 0.1, np.inf, np.inf], [np.inf, np.inf, 0.2, 0.05]])
    chosen = greedy_assign(table_from_matrix(d, np.array([0, 1])))
    assert [e.image for e in chosen] == [1, 3]


def test_greedy_equals_argmin_when_nearest_are_distinct():
    d = np.array([[0.1, 0.9, 0.9], [0.9, 0.2, 0.9], [0.9, 0.9, 0.3]])
    t = table_from_matrix(d)
    assert [e.image for e in greedy_assign(t)] == [e.image for e in nearest_assign(t)] == [0, 1, 2]


def test_greedy_insufficient_images():
    d = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    with pytest.raises(InsufficientImagesError, match="prototype 2"):
        greedy_assign(table_from_matrix(d))


def test_greedy_matches_step_trace_on_random_tables():
    rng = np.random.default_rng(42)
    for _ in range(100):
        d, classes = random_class_table(rng)
        ref = greedy_trace(d)
        table = table_from_matrix(d, classes)
        if ref is None:
            with pytest.raises(InsufficientImagesError):
                greedy_assign(table)
        else:
            assert [e.image for e in greedy_assign(table)] == ref


@given(st.integers(0, 2**32 - 1))
def test_greedy_injective_deterministic_and_no_better_than_argmin(seed):
    rng = np.random.default_rng(seed)
    d, classes = random_class_table(rng)
    table = table_from_matrix(d, classes)
    try:
        a = greedy_assign(table)
    except InsufficientImagesError:
        return
    b = greedy_assign(table)
    assert a == b
    images = [e.image for e in a]
    assert len(set(images)) == len(images)
    for m, e in enumerate(a):
        assert e.distance >= np.min(d[m])


@given(st.integers(0, 2**32 - 1))
def test_greedy_total_at_least_optimal_matching(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 7))
    n = int(rng.integers(m, min(10, m + 3) + 1))
    d = rng.uniform(0, 1, (m, n))
    greedy = sum(e.distance for e in greedy_assign(table_from_matrix(d)))
    assert greedy >= best_injection_cost(d) - 1e-12


# distance table -------------------------------------------------------------

def test_distance_table_enumeration():
    # 3 images, 2 prototypes (one per class), 1x2 feature grid, D = 2
    feats = np.array(
        [
            [[[0.0, 1.0]], [[0.0, 0.0]]],
            [[[2.0, 3.0]], [[1.0, 1.0]]],
            [[[0.5, 0.0]], [[0.5, 2.0]]],
        ]
    )
    protos = np.array([[1.0, 0.0], [2.0, 2.0]])
    labels = np.array([0, 1, 0])
    t = build_distance_table(protos, np.array([0, 1]), feats, labels)
    # proto 0 vs image 0: positions (0,0),(1,0) -> 1, 0 ; vs image 2: (.5,.5),(0,2) -> .5, 5
    assert [(e.image, e.col, e.distance) for e in t.rows[0]] == [(0, 1, 0.0), (2, 0, 0.5)]
    # proto 1 vs image 1: (2,1),(3,1) -> 1, 2
    assert [(e.image, e.col, e.distance) for e in t.rows[1]] == [(1, 0, 1.0)]


def test_distance_table_errors_without_class_images():
    with pytest.raises(InsufficientImagesError):
        build_distance_table(np.zeros((2, 1)), np.array([0, 1]), np.zeros((2, 1, 1, 1)), np.array([0, 0]))


# push -----------------------------------------------------------------------

@pytest.fixture
def pushed():
    rng = np.random.default_rng(4)
    images = rng.uniform(size=(8, 16, 16)).astype(np.float32)
    labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    state = build_model(BackboneConfig(16, 16, (4, 6)), n_prototypes=6, seed=9)
    fc_before = [p.data.copy() for p in state.fc_head]
    classes_before = state.prototypes.classes.copy()
    push_prototypes(state, images, labels)
    return state, images, labels, fc_before, classes_before


def test_push_postconditions(pushed):
    state, images, labels, fc_before, classes_before = pushed
    feats = extract_features(state, images)
    protos = state.prototypes
    assert np.array_equal(protos.classes, classes_before)
    for m, rec in enumerate(protos.provenance):
        assert labels[rec.image] == protos.classes[m]
        assert protos.vectors.data[m].tobytes() == feats[rec.image, :, rec.row, rec.col].tobytes()
    images_used = [r.image for r in protos.provenance]
    assert len(set(images_used)) == len(images_used)
    for a, b in zip(state.fc_head, fc_before):
        assert a.data.tobytes() == b.tobytes()


def test_push_is_idempotent(pushed):
    state = pushed[0]
    images, labels = pushed[1], pushed[2]
    vec = state.prototypes.vectors.data.copy()
    prov = list(state.prototypes.provenance)
    push_prototypes(state, images, labels)
    assert state.prototypes.vectors.data.tobytes() == vec.tobytes()
    assert [(r.image, r.row, r.col) for r in state.prototypes.provenance] == [(r.image, r.row, r.col) for r in prov]
    assert all(r.distance == 0.0 for r in state.prototypes.provenance)


def test_push_needs_enough_images():
    state = build_model(BackboneConfig(16, 16, (4, 6)), n_prototypes=6)
    images = np.random.default_rng(0).uniform(size=(4, 16, 16))
    with pytest.raises(InsufficientImagesError):
        push_prototypes(state, images, np.array([0, 0, 1, 1]))


def test_nearest_push_allows_repeats_greedy_does_not():
    state = build_model(BackboneConfig(16, 16, (4, 6)), n_prototypes=6, seed=1)
    rng = np.random.default_rng(1)
    images = rng.uniform(size=(8, 16, 16)).astype(np.float32)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    # identical prototypes all share one nearest image under the unconstrained rule
    state.prototypes.vectors.data[:] = state.prototypes.vectors.data[0]
    _, chosen = push_prototypes(state, images, labels, greedy=False)
    assert len({e.image for e in chosen[:3]}) == 1
    state.prototypes.vectors.data[:] = state.prototypes.vectors.data[0]
    _, chosen = push_prototypes(state, images, labels, greedy=True)
    assert len({e.image for e in chosen}) == 6


def test_provenance_export(pushed):
    state = pushed[0]
    text = provenance_table(state, delimiter="\t")
    lines = text.splitlines()
    assert lines[0].split("\t") == ["prototype", "class", "image", "row", "col", "distance"]
    assert len(lines) == 1 + state.prototypes.count
    first = lines[1].split("\t")
    rec = state.prototypes.provenance[0]
    assert first[:5] == ["0", "0", str(rec.image), str(rec.row), str(rec.col)]
    assert float(first[5]) == pytest.approx(rec.distance)


# diversity ------------------------------------------------------------------

def test_diversity_identical_and_orthogonal():
    same = diversity_metrics(np.array([[1.0, 2.0]] * 3 + [[0.0, 1.0]] * 2), [0, 0, 0, 1, 1])
    assert same == {0: (0.0, 0.0), 1: (0.0, 0.0)}
    ortho = diversity_metrics(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]), [0, 0, 1, 1])
    assert ortho[0][0] == pytest.approx(1.0)
    assert ortho[0][1] == pytest.approx(math.sqrt(2))


def test_diversity_three_vectors_mean_over_pairs():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    cos, l2 = diversity_metrics(np.vstack([v, v]), [0, 0, 0, 1, 1, 1])[0]
    assert cos == pytest.approx((1 + 2 + 1) / 3)
    assert l2 == pytest.approx((math.sqrt(2) + 2 + math.sqrt(2)) / 3)


def test_diversity_zero_vector_undefined():
    with pytest.raises(UndefinedCosineError):
        diversity_metrics(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [0, 0, 1, 1])


def test_diversity_table_layout():
    rows = {
        "ProtoPNet w/o greedy selection": {0: (0.034, 0.805), 1: (0.061, 0.827)},
        "ProtoPNet w/ greedy selection": {0: (0.074, 1.215), 1: (0.094, 1.712)},
    }
    text = format_diversity_table(rows)
    lines = text.splitlines()
    assert "Cosine distance" in lines[0] and "L2 distance" in lines[0]
    assert lines[1].split("|")[1].split() == ["Non-cancer", "Cancer"]
    assert lines[3].startswith("ProtoPNet w/ greedy selection")
    assert lines[3].split("|")[1].split() == ["0.074", "0.094"]
    assert lines[3].split("|")[2].split() == ["1.215", "1.712"]
