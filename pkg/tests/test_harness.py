import csv
import json

import numpy as np
import pytest

from advclip.attacks import ATTACKS, EPS_STRONG, EPS_WEAK
from advclip.harness import (
    BaselineConvNet, ExperimentMatrix, Lab, MissingArtifactError, epochs_to_converge, run_cross_matrix,
    run_detectability, run_efficiency, run_robustness, write_csv,
)
from advclip.metrics import MetricsReport, macro_f1_from_confusion
from conftest import tiny_experiment


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    lab = Lab(tiny_experiment(tmp_path_factory.mktemp("lab")))
    lab.backbone()
    lab.generate_all()
    return lab


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestArtifacts:
    def test_sources_disjoint(self, lab):
        ids = [set(b.ids) for b in lab.sources().values()]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                assert not ids[i] & ids[j]

    def test_audit_passes(self, lab):
        assert len(lab.audit) == len(ATTACKS) * 2 * 2
        assert all(r["passed"] for r in lab.audit)

    def test_reload_from_disk(self, lab):
        again = Lab(lab.cfg, build=False)
        assert again.backbone().digest() == lab.backbone().digest()
        a = again.adversarial("PGD", EPS_STRONG, "test")
        np.testing.assert_array_equal(a.pixels, lab.adversarial("PGD", EPS_STRONG, "test").pixels)

    def test_missing_artifact(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="pretrain"):
            Lab(tiny_experiment(tmp_path), build=False).backbone()

    def test_test_set_balanced(self, lab):
        t = lab.test_set("FGSM", EPS_STRONG)
        assert np.bincount(t.labels).tolist() == [8, 8]

    def test_training_pool(self, lab):
        pool = lab.training_pool(("BIM",), EPS_STRONG)
        assert len(pool["train"]) + len(pool["val"]) == 32
        assert set(pool["train"].labels.tolist()) == {0, 1}


class TestRunners:
    def test_cross_matrix_shape(self, lab):
        mat = run_cross_matrix(lab, "adapter", EPS_STRONG)
        assert mat.complete() and len(mat.cells) == 64
        rows = read_rows(lab.reports / "cross_matrix_adapter_eps10.csv")
        assert len(rows) == 64
        for r in rows:
            cm = np.array([[int(r["tn"]), int(r["fp"])], [int(r["fn"]), int(r["tp"])]])
            assert abs(float(r["accuracy"]) - np.trace(cm) / cm.sum()) <= 1e-12
            assert abs(float(r["macro_f1"]) - macro_f1_from_confusion(cm, warn=False)) <= 1e-12

    def test_detectability(self, lab):
        table = run_detectability(lab, EPS_STRONG, modes=("prompt",))
        assert set(table["prompt"]) == set(ATTACKS)
        assert (lab.reports / "detectability_eps10.csv").exists()

    def test_robustness_both_budgets(self, lab):
        grids = run_robustness(lab, "adapter")
        assert set(grids) == {EPS_WEAK, EPS_STRONG}
        assert all(g.complete() for g in grids.values())
        summary = json.loads((lab.reports / "robustness_adapter.json").read_text())
        assert set(summary["mean_accuracy"]) == {"eps5", "eps10"}

    def test_efficiency_rows(self, lab):
        rows = run_efficiency(lab, EPS_STRONG)
        assert [r["method"] for r in rows] == ["baseline", "adapter", "prompt", "fusion"]
        for r in rows:
            assert 1 <= r["epochs_to_converge"] <= lab.cfg.detector.schedule.epochs
        assert rows[0]["trainable_ratio"] == 1.0

    def test_loss_curves_written(self, lab):
        curves = list((lab.reports / "loss_curves").glob("*.csv"))
        assert curves
        rows = read_rows(curves[0])
        assert rows[0]["step"] == "0"

    def test_manifest(self, lab):
        path = lab.write_manifest()
        m = json.loads(path.read_text())
        assert m["seed"] == 17 and m["config_sha256"] == lab.cfg.digest()
        assert m["artifacts"]["backbone_sha256"] == lab.backbone().digest()
        assert m["reports"]


class TestPieces:
    def test_epochs_to_converge(self):
        assert epochs_to_converge([(1, 0.5), (2, 0.897), (3, 0.9), (4, 0.899)]) == 2
        assert epochs_to_converge([(1, 0.9)]) == 1

    def test_baseline_param_count(self):
        net = BaselineConvNet((24, 48, 96, 192))
        expected = sum(c_out * c_in * 9 + c_out for c_in, c_out in [(3, 24), (24, 48), (48, 96), (96, 192)]) + 192 * 2 + 2
        assert net.trainable_count() == expected

    def test_baseline_forward_shape(self):
        net = BaselineConvNet((4, 4, 4, 4))
        p = net.predict_proba(np.random.default_rng(0).random((3, 3, 16, 16)))
        assert p.shape == (3,) and np.all((p >= 0) & (p <= 1))

    def test_matrix_diagonal_dominance(self):
        atk = ("A", "B")
        m = ExperimentMatrix("fusion", EPS_STRONG, atk)
        perfect = MetricsReport.from_predictions([0, 1], [0, 1])
        half = MetricsReport.from_predictions([0, 0], [0, 1])
        m.cells = {("A", "A"): perfect, ("A", "B"): half, ("B", "A"): perfect, ("B", "B"): half}
        assert m.complete() and m.diagonal_dominance() == 1

    def test_csv_float_repr_roundtrips(self, tmp_path):
        write_csv(tmp_path / "x.csv", [{"a": 0.1 + 0.2}], ["a"])
        assert float(read_rows(tmp_path / "x.csv")[0]["a"]) == 0.1 + 0.2
