"""End-to-end acceptance: eight criteria at their stated tolerances.

The desk-scale runs (3 seeds x {default, no-KD, no-greedy}, plus a repeat of
the first default run) go through the command-line pipeline and are shared
by the criteria below. Expect roughly half an hour on one core.
"""

import json
import time

import numpy as np
import pytest

from protopnetpp import data as datamod
from protopnetpp.cli import DEFAULT_SEED, main
from protopnetpp.evaluation import IOU_THRESHOLDS
from protopnetpp.gradchecks import run_gradchecks
from protopnetpp.model import checkpoint_bytes, explain, extract_features, load_checkpoint
from protopnetpp.prototypes import InsufficientImagesError, greedy_assign
from protopnetpp import training
from protopnetpp.training import TrainConfig, train

from .conftest import ACCEPTANCE
from .oracles import (
    check_auc_instances,
    check_double_min_instances,
    check_otsu_images,
    greedy_trace,
    random_class_table,
    table_from_matrix,
)

pytestmark = pytest.mark.slow

SEEDS = (DEFAULT_SEED, DEFAULT_SEED + 1, DEFAULT_SEED + 2)
VARIANTS = {"default": [], "no_kd": ["--no-kd"], "no_greedy": ["--no-greedy"]}
CPU_BUDGET = 600.0


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def _run(argv):
    code = main(argv)
    assert code == 0, f"command failed ({code}): {' '.join(argv)}"


class Runs:
    """Lazily executed CLI runs, keyed by (seed, variant, repeat)."""

    def __init__(self, root):
        self.root = root
        self.cpu = {}
        self._done = set()

    def data(self, seed):
        path = self.root / f"data-{seed}"
        if not (path / "test" / "labels.csv").is_file():
            _run(["gen-data", "--seed", str(seed), "--out", str(path)])
        return path

    def run(self, seed, variant="default", repeat=0):
        out = self.root / f"{variant}-{seed}-{repeat}"
        key = (seed, variant, repeat)
        if key not in self._done:
            data = self.data(seed) if repeat == 0 else self._fresh_data(seed, repeat)
            started = time.process_time()
            _run(["train", "--data", str(data), "--seed", str(seed), "--workers", "1", "--out", str(out), *VARIANTS[variant]])
            self.cpu[key] = time.process_time() - started
            _run(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(data), "--workers", "1",
                  "--out", str(out)])
            self._done.add(key)
        return out

    def _fresh_data(self, seed, repeat):
        path = self.root / f"data-{seed}-r{repeat}"
        if not (path / "test" / "labels.csv").is_file():
            _run(["gen-data", "--seed", str(seed), "--out", str(path)])
        return path

    def metrics(self, seed, variant="default"):
        return json.loads((self.run(seed, variant) / "metrics.json").read_text())


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    started = time.process_time()
    lines, ok = run_gradchecks(trials=20, tolerance=1e-3, step=1e-3)
    elapsed = time.process_time() - started
    for line in lines:
        print(line)
    worst = max(float(l.split("max_rel_err=")[1].split()[0]) for l in lines)
    passed = ok and elapsed < 120
    record("criterion 1 gradient checks", passed,
           f"{len(lines)} checks x 20 trials, worst rel err {worst:.2e} (tol 1e-3), {elapsed:.1f}s CPU (limit 120s)")
    assert passed


# 2 ---------------------------------------------------------------------------

def test_criterion_2_oracle_equivalence():
    losses_ok = check_double_min_instances(200, seed=2024)
    auc_err = check_auc_instances(200, seed=2024)
    otsu_ok = check_otsu_images(50, seed=2024)
    passed = losses_ok and auc_err <= 1e-9 and otsu_ok
    record("criterion 2 oracle equivalence", passed,
           f"cluster/separation exact on 200: {losses_ok}; roc_auc max |diff| {auc_err:.1e} on 200; "
           f"otsu exhaustive match on 50: {otsu_ok}")
    assert passed


# 3 ---------------------------------------------------------------------------

def test_criterion_3_prototype_postconditions(monkeypatch):
    ds = datamod.prepare(datamod.generate(datamod.GenConfig(n_neg=16, n_pos=16, seed=7)))
    images, labels = ds.images, ds.labels
    checked = []
    real_push = training.push_prototypes

    def checked_push(state, imgs, labs, greedy=True, features=None):
        result = real_push(state, imgs, labs, greedy=greedy, features=features)
        feats = extract_features(state, imgs)
        protos = state.prototypes
        exact = all(
            labs[r.image] == protos.classes[m]
            and protos.vectors.data[m].tobytes() == feats[r.image, :, r.row, r.col].tobytes()
            for m, r in enumerate(protos.provenance)
        )
        distinct = len({r.image for r in protos.provenance}) == protos.count
        checked.append((exact, distinct))
        return result

    monkeypatch.setattr(training, "push_prototypes", checked_push)
    train(images, labels, TrainConfig(epochs=(1, 2, 2), seed=3))
    pushes_ok = len(checked) == 5 and all(a and b for a, b in checked)

    rng = np.random.default_rng(99)
    trace_ok, raised = True, 0
    for _ in range(100):
        d, classes = random_class_table(rng)
        ref = greedy_trace(d)
        table = table_from_matrix(d, classes)
        if ref is None:
            try:
                greedy_assign(table)
                trace_ok = False
            except InsufficientImagesError:
                raised += 1
        elif [e.image for e in greedy_assign(table)] != ref:
            trace_ok = False
    try:
        greedy_assign(table_from_matrix(np.ones((3, 2))))
        short_ok = False
    except InsufficientImagesError:
        short_ok = True
    passed = pushes_ok and trace_ok and short_ok
    record("criterion 3 prototype postconditions", passed,
           f"{len(checked)} pushes exact+distinct: {pushes_ok}; greedy == step trace on 100 tables: {trace_ok} "
           f"({raised} insufficient cases raised); 3 prototypes / 2 images raises: {short_ok}")
    assert passed


# 4 ---------------------------------------------------------------------------

def test_criterion_4_end_to_end(runs):
    rows, passed = [], True
    for seed in SEEDS:
        a = runs.metrics(seed)["auc"]
        cpu = runs.cpu[(seed, "default", 0)]
        ok = a["ensemble"] >= 0.95 and a["ensemble"] >= max(a["global"], a["protopnet"]) - 0.01 and cpu < CPU_BUDGET
        passed &= ok
        rows.append(f"seed {seed}: ens {a['ensemble']:.4f} glob {a['global']:.4f} proto {a['protopnet']:.4f} "
                    f"train {cpu:.0f}s")
    record("criterion 4 synthetic end-to-end", passed, "; ".join(rows))
    assert passed


# 5 ---------------------------------------------------------------------------

def test_criterion_5_kd_ablation(runs):
    kd = [runs.metrics(s)["auc"]["protopnet"] for s in SEEDS]
    no_kd = [runs.metrics(s, "no_kd")["auc"]["protopnet"] for s in SEEDS]
    diff = float(np.mean(kd) - np.mean(no_kd))
    passed = diff >= -0.005
    record("criterion 5 KD ablation", passed,
           f"ProtoPNet AUC with KD {np.mean(kd):.4f} vs without {np.mean(no_kd):.4f}, signed diff {diff:+.4f} "
           f"(need >= -0.005); per seed {[round(v, 4) for v in kd]} vs {[round(v, 4) for v in no_kd]}")
    assert passed


# 6 ---------------------------------------------------------------------------

def _mean_diversity(metrics_list):
    cos = np.mean([[m["diversity"][c]["cosine"] for c in ("non_cancer", "cancer")] for m in metrics_list], axis=0)
    l2 = np.mean([[m["diversity"][c]["l2"] for c in ("non_cancer", "cancer")] for m in metrics_list], axis=0)
    return cos, l2


def test_criterion_6_greedy_diversity(runs):
    g_cos, g_l2 = _mean_diversity([runs.metrics(s) for s in SEEDS])
    n_cos, n_l2 = _mean_diversity([runs.metrics(s, "no_greedy") for s in SEEDS])
    passed = g_cos.mean() >= n_cos.mean() and g_l2.mean() >= n_l2.mean()
    record("criterion 6 greedy diversity", passed,
           f"cosine greedy {g_cos.mean():.4f} vs plain {n_cos.mean():.4f} (per class {np.round(g_cos, 4).tolist()} vs "
           f"{np.round(n_cos, 4).tolist()}); L2 greedy {g_l2.mean():.4f} vs plain {n_l2.mean():.4f} "
           f"(per class {np.round(g_l2, 4).tolist()} vs {np.round(n_l2, 4).tolist()})")
    assert passed


# 7 ---------------------------------------------------------------------------

def test_criterion_7_localisation(runs):
    rows, passed = [], True
    for seed in SEEDS:
        loc = runs.metrics(seed)["localisation"]
        assert tuple(loc["iou_thresholds"]) == IOU_THRESHOLDS
        curve = loc["pr_auc"]
        monotone = all(a >= b for a, b in zip(curve, curve[1:]))
        ok = curve[0] >= 0.5 and monotone
        passed &= ok
        rows.append(f"seed {seed}: PR-AUC@0.05 {curve[0]:.3f} @0.5 {curve[-1]:.3f} monotone {monotone}")
    record("criterion 7 localisation", passed, "; ".join(rows))
    assert passed


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism_and_formats(runs, tmp_path):
    seed = SEEDS[0]
    first, second = runs.run(seed), runs.run(seed, repeat=1)
    names = ["metrics.json", "model.ckpt", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "history.csv",
             "localisation.csv", "predictions.csv"]
    same = {n: (first / n).read_bytes() == (second / n).read_bytes() for n in names}
    ckpt_rt = all(
        checkpoint_bytes(load_checkpoint(p)) == p.read_bytes() for p in sorted(first.glob("*.ckpt"))
    )
    data_dir = runs.data(seed) / "train"
    datamod.save_dataset(datamod.load_dataset(data_dir), tmp_path / "copy")
    files = sorted(p.relative_to(data_dir) for p in data_dir.rglob("*") if p.is_file())
    data_rt = all((data_dir / f).read_bytes() == (tmp_path / "copy" / f).read_bytes() for f in files)
    gen_same = all(
        (runs.data(seed) / s / f).read_bytes() == (runs._fresh_data(seed, 1) / s / f).read_bytes()
        for s in ("train", "test") for f in ("labels.csv", "images/0000.pgm", "images/0399.pgm" if s == "train" else "images/0199.pgm")
    )
    passed = all(same.values()) and ckpt_rt and data_rt and gen_same
    record("criterion 8 determinism and formats", passed,
           f"repeat run identical: {sum(same.values())}/{len(same)} artifacts; checkpoint round-trip: {ckpt_rt}; "
           f"dataset round-trip ({len(files)} files): {data_rt}; regenerated data identical: {gen_same}")
    assert passed


# additional measured claims --------------------------------------------------

def test_stage_losses_decrease(runs):
    import csv

    rows, passed = [], True
    for seed in SEEDS:
        with open(runs.run(seed) / "history.csv") as fh:
            hist = list(csv.DictReader(fh))
        for stage in ("1", "2", "3"):
            losses = [float(r["total"]) for r in hist if r["stage"] == stage]
            ok = losses[-1] <= losses[0]
            passed &= ok
            rows.append(f"{seed}/s{stage} {losses[0]:.3f}->{losses[-1]:.3f}")
    record("extra: per-stage final loss <= first epoch", passed, ", ".join(rows))
    assert passed


def test_explanation_hits_lesion(runs):
    rows, passed = [], True
    for seed in SEEDS:
        state = load_checkpoint(runs.run(seed) / "model.ckpt")
        test = datamod.prepare(datamod.load_dataset(runs.data(seed) / "test"))
        hits = total = 0
        for img, label, mask in zip(test.images, test.labels, test.masks):
            ex = explain(state, img, k=1)
            if label != 1 or ex.prediction.ensemble_probs[0, 1] < 0.5:
                continue
            top = ex.by_class[1][0].similarity_map
            r, c = np.unravel_index(np.argmax(top), top.shape)
            hits += bool(mask[r, c])
            total += 1
        frac = hits / max(total, 1)
        passed &= frac >= 0.7
        rows.append(f"seed {seed}: {hits}/{total} = {frac:.2f}")
    record("extra: top cancer prototype argmax inside lesion >= 70% of true positives", passed, "; ".join(rows))
    assert passed
