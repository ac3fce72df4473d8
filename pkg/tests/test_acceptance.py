"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run.
Training-based criteria use 10 epochs instead of the 50-epoch default so the
module finishes in a few minutes on one CPU core.
"""
import csv
import json
import os
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
import yaml

from transocc.classifier import ClassifierConfig, build_network
from transocc.cli import main
from transocc.evaluation import LabeledScores, auc, aupr
from transocc.scoring import ProbabilityMatrix, probability_matrices, probability_matrix, score
from transocc.transforms import preset

from test_evaluation import brute_force_auc, random_instance

pytestmark = pytest.mark.slow

ACCEPTANCE_CONFIG = {
    "dataset": {"synthetic": {"n_majority": 1200, "n_minority": 200, "n_train": 1000, "dims": [32, 32, 1],
                              "brightness_shift": 0.2, "contrast_shift": 1.2}},
    "transform_set": "LM(5,2)",
    "classifier": {"architecture": "small_conv"},
    "train": {"epochs": 10},
    "runs": 3,
    "seed": 0,
}


def write_config(path: Path, out_dir: Path, **changes) -> Path:
    cfg = {**ACCEPTANCE_CONFIG, **changes, "output_dir": str(out_dir)}
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def lm_run(workdir):
    cfg = write_config(workdir / "lm.yaml", workdir / "lm")
    assert main(["train", "-c", str(cfg)]) == 0
    assert main(["evaluate", "-c", str(cfg)]) == 0
    return workdir / "lm"


@pytest.mark.criterion(1, "scoring identities")
def test_criterion_1_scoring_identities(oracle_stub, uniform_stub, small_model, record_property):
    rng = np.random.default_rng(0)
    refs = rng.uniform(0.25, 0.65, (5, 16, 16, 1)).astype(np.float32)
    worst_uniform = 0.0
    for name in ("LM(5,0)", "LM(5,1)", "LM(5,2)", "LM(3,0)", "LM(7,0)", "R(4,0)"):
        ts = preset(name)
        oracle = oracle_stub(ts, refs)
        uniform = uniform_stub(ts, refs.shape[1:])
        for img in refs:
            assert score(probability_matrix(oracle, img)) == ts.n
            worst_uniform = max(worst_uniform, abs(score(probability_matrix(uniform, img)) - 1))
    assert worst_uniform <= 1e-9
    assert score(ProbabilityMatrix([[0.7, 0.3], [0.4, 0.6]])) == pytest.approx(1.3, abs=1e-12)

    inputs = np.concatenate([rng.random((64, 16, 16, 1), dtype=np.float32),
                             np.zeros((1, 16, 16, 1), np.float32), np.ones((1, 16, 16, 1), np.float32)])
    s = np.trace(probability_matrices(small_model, inputs), axis1=1, axis2=2)
    assert (s >= 0).all() and (s <= small_model.n_classes).all()
    record_property("max_uniform_dev", f"{worst_uniform:.1e}")
    record_property("trained_s_range", f"[{s.min():.3f}, {s.max():.3f}]")


@pytest.mark.criterion(2, "metric oracle equivalence")
def test_criterion_2_metric_oracles(record_property):
    rng = np.random.default_rng(2024)
    for _ in range(200):
        s, y = random_instance(rng)
        assert len(s) <= 12
        assert auc(LabeledScores(s, y)) == brute_force_auc(s.tolist(), y.tolist())

    # precision and recall at each distinct threshold, enumerated by hand
    fixtures = [
        ([0.9, 0.8, 0.7], [1, 0, 1], Fraction(1, 2) * 1 + Fraction(1, 2) * Fraction(2, 3), Fraction(1, 2)),
        ([0.5, 0.5, 0.4, 0.3, 0.3, 0.1], [1, 0, 1, 1, 0, 0],
         Fraction(1, 3) * (Fraction(1, 2) + Fraction(2, 3) + Fraction(3, 5)),
         # -s order: 0.1(-) 0.3(+-) 0.4(+) 0.5(+-); precision 1, 2/3, 1/2, 1/2 at recall 1/3, 2/3, 2/3, 1
         Fraction(1, 3) * 1 + Fraction(1, 3) * Fraction(2, 3) + Fraction(1, 3) * Fraction(1, 2)),
        ([0.2, 0.4, 0.6, 0.8], [1, 0, 1, 0], Fraction(1, 2), Fraction(1, 2)),
    ]
    for scores, flags, maj, mino in fixtures:
        ls = LabeledScores(scores, flags)
        assert aupr(ls, "majority") == pytest.approx(float(maj), abs=1e-12)
        assert aupr(ls, "minority") == pytest.approx(float(mino), abs=1e-12)
    record_property("auc_instances", 200)
    record_property("aupr_fixtures", len(fixtures))


@pytest.mark.criterion(3, "gradient check")
def test_criterion_3_gradient_check(record_property):
    torch.manual_seed(0)
    net = build_network(ClassifierConfig(5, (16, 16, 1))).double()
    x = torch.rand(6, 1, 16, 16, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 4, 0])

    def loss():
        return F.cross_entropy(net(x), y)

    net.zero_grad()
    loss().backward()
    params = list(net.parameters())
    rng = np.random.default_rng(3)
    # steps of 1e-5 and above start crossing ReLU / max-pool kinks
    eps, worst = 1e-6, 0.0
    with torch.no_grad():
        for _ in range(10):
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(d)) for d in p.shape)
            analytic = p.grad[idx].item()
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss().item()
            p[idx] = orig - eps
            down = loss().item()
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    record_property("max_rel_error", f"{worst:.2e}")
    assert worst < 1e-4


@pytest.mark.criterion(4, "synthetic separation with LM(5,2)")
def test_criterion_4_synthetic_separation(lm_run, record_property):
    metrics = json.loads((lm_run / "metrics.txt").read_text())
    record_property("auc", metrics["percent"]["auc"])
    assert metrics["runs"] == 3
    assert metrics["mean"]["auc"] >= 0.85
    for k in range(3):
        rows = read_rows(lm_run / f"run_{k}" / "scores.csv")
        assert sum(r["is_majority"] == "1" for r in rows) == 200 and len(rows) == 400
        maj = [float(r["score"]) for r in rows if r["is_majority"] == "1"]
        mino = [float(r["score"]) for r in rows if r["is_majority"] == "0"]
        assert np.mean(maj) > np.mean(mino)
        if k == 0:
            record_property("mean_s_maj", f"{np.mean(maj):.3f}")
            record_property("mean_s_min", f"{np.mean(mino):.3f}")


@pytest.mark.criterion(5, "knowledge-match contrast LM(5,2) vs R(4,0)")
def test_criterion_5_transform_contrast(workdir, record_property):
    cfg = write_config(workdir / "cmp.yaml", workdir / "cmp")
    assert main(["compare-transforms", "-c", str(cfg), "--presets", "LM(5,2)", "R(4,0)"]) == 0
    rows = read_rows(workdir / "cmp" / "comparison.csv")
    by_name = {r["transform_set"]: r for r in rows}
    lm, rot = float(by_name["LM(5,2)"]["auc"]), float(by_name["R(4,0)"]["auc"])
    record_property("auc_LM52", f"{lm:.4f}")
    record_property("auc_R40", f"{rot:.4f}")
    assert rot <= 0.65 and lm >= 0.85
    assert [r["transform_set"] for r in rows] == ["LM(5,2)", "R(4,0)"]


@pytest.mark.criterion(6, "training-size robustness 100 vs 1000")
def test_criterion_6_size_sweep(workdir, record_property):
    cfg = write_config(workdir / "sweep.yaml", workdir / "sweep")
    assert main(["size-sweep", "-c", str(cfg), "--sizes", "100", "1000"]) == 0
    rows = {int(r["train_size"]): r for r in read_rows(workdir / "sweep" / "size_sweep.csv")}
    a100, a1000 = float(rows[100]["auc"]), float(rows[1000]["auc"])
    record_property("auc_100", f"{a100:.4f}")
    record_property("auc_1000", f"{a1000:.4f}")
    assert abs(a100 - a1000) <= 0.10


SKIN_ENV = "TRANSOCC_SKIN_MANIFEST"


@pytest.mark.optional
@pytest.mark.criterion(7, "skin-lesion reproduction (optional)")
@pytest.mark.skipif(not os.environ.get(SKIN_ENV), reason=f"set {SKIN_ENV} to a skin-lesion manifest to run")
def test_criterion_7_skin_lesion(tmp_path, record_property):
    out = tmp_path / "skin"
    args = ["--manifest", os.environ[SKIN_ENV], "--transform-set", "LM(5,0)", "--architecture", "wide_residual",
            "--runs", "3", "--epochs", os.environ.get("TRANSOCC_SKIN_EPOCHS", "50"), "-o", str(out)]
    assert main(["train"] + args) == 0
    assert main(["evaluate"] + args) == 0
    metrics = json.loads((out / "metrics.txt").read_text())
    record_property("auc", metrics["percent"]["auc"])
    assert abs(100 * metrics["mean"]["auc"] - 72.8) <= 5


@pytest.mark.criterion(8, "determinism of reruns")
def test_criterion_8_determinism(lm_run, workdir, record_property):
    cfg = write_config(workdir / "lm_again.yaml", workdir / "lm_again")
    assert main(["train", "-c", str(cfg)]) == 0
    assert main(["evaluate", "-c", str(cfg)]) == 0
    again = workdir / "lm_again"
    assert (again / "metrics.txt").read_bytes() == (lm_run / "metrics.txt").read_bytes()
    for k in range(3):
        for name in ("model.bin", "loss.csv", "scores.csv"):
            assert (again / f"run_{k}" / name).read_bytes() == (lm_run / f"run_{k}" / name).read_bytes()
    record_property("runs_compared", 3)
