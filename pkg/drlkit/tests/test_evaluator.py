"""
Tests for evaluation: accuracies, class-wise spread, data amounts,
the PGD-AT baseline, the threat matrix and report files.
"""

import csv

import numpy as np
import pytest

from drlkit.core.tensor import Tensor
from drlkit.models.dataset import stack_images, stack_labels
from drlkit.models.schemas import (
    ArchKind,
    ArchSpec,
    AttackConfig,
    AttackKind,
    AttackSpec,
    EvalReport,
    ObjectiveKind,
    ThreatSpec,
    TrainConfig,
)
from drlkit.services.dataset_forge import build_drl_dataset
from drlkit.services.evaluator import (
    DataAmountPlan,
    TargetProvenance,
    accuracy,
    build_report,
    classwise_std,
    corruption_accuracy,
    data_amount,
    evaluate_attacks_async,
    format_amount,
    load_report,
    per_class_accuracy,
    read_series,
    robust_accuracy,
    save_report,
    substitute_plan,
    summary_columns,
    threat_matrix_eval,
    train_pgd_at,
    write_series,
    write_summary_csv,
    write_summary_table,
)
from drlkit.services.model_zoo import alternate_arch, init_model
from drlkit.services.trainer import pretrain, train
from drlkit.utils.errors import EvaluationError, MissingArtifactError, ProvenanceError

IMAGE_ARCH = ArchSpec(kind=ArchKind.MLP, input_shape=(1, 6, 6), num_classes=3, hidden=(8,))


def _linear(weight, bias):
    weight = np.asarray(weight, dtype=np.float64)
    model = init_model(ArchSpec(kind=ArchKind.LINEAR, input_shape=(weight.shape[0],),
                                num_classes=weight.shape[1]), seed=0)
    model.params["fc0.weight"] = Tensor(weight, requires_grad=True)
    model.params["fc0.bias"] = Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)
    return model


@pytest.fixture(scope="module")
def test_xy(tiny_task):
    _, test_examples = tiny_task
    return stack_images(test_examples), stack_labels(test_examples)


@pytest.fixture(scope="module")
def drl_dataset(tiny_task):
    train_examples, _ = tiny_task
    spec = AttackSpec(kind=AttackKind.FGSM, config=AttackConfig(epsilon=0.1))
    return build_drl_dataset(train_examples[:30], [init_model(IMAGE_ARCH, seed=50)], [spec], threads=2)


class TestAccuracy:
    def test_perfect_model(self):
        model = _linear(np.eye(3) * 5.0, np.zeros(3))
        assert accuracy(model, np.eye(3), [0, 1, 2]) == 100.0

    def test_constant_model_on_balanced_data(self):
        model = _linear(np.zeros((3, 3)), [1.0, 0.0, 0.0])
        assert accuracy(model, np.ones((6, 3)), [0, 1, 2, 0, 1, 2]) == pytest.approx(100.0 / 3)

    def test_matches_naive_recount(self, mlp_model, test_xy):
        x, y = test_xy
        naive = sum(int(np.argmax(mlp_model.forward_logits(x[i:i + 1]).data) == y[i]) for i in range(len(y)))
        assert accuracy(mlp_model, x, y) == pytest.approx(100.0 * naive / len(y), abs=1e-12)

    def test_accepts_examples(self, mlp_model, tiny_task):
        _, test_examples = tiny_task
        x, y = stack_images(test_examples), stack_labels(test_examples)
        assert accuracy(mlp_model, test_examples) == accuracy(mlp_model, x, y)

    def test_empty_set(self, mlp_model):
        with pytest.raises(EvaluationError):
            accuracy(mlp_model, [])


class TestClasswiseStd:
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([0, 0, 1, 1])

    def test_two_class_example(self):
        model = _linear(np.eye(2), np.zeros(2))
        assert per_class_accuracy(model, self.x, self.y) == [100.0, 50.0]
        assert classwise_std(model, self.x, self.y) == pytest.approx(25.0)

    def test_invariant_to_class_relabelling(self):
        model = _linear(np.eye(2), np.zeros(2))
        swapped = _linear(np.eye(2)[:, ::-1], np.zeros(2))
        assert classwise_std(swapped, self.x, 1 - self.y) == classwise_std(model, self.x, self.y)

    def test_missing_class(self):
        model = _linear(np.eye(3), np.zeros(3))
        with pytest.raises(EvaluationError):
            per_class_accuracy(model, np.eye(3)[:2], [0, 1])


class TestRobustAccuracy:
    @pytest.mark.parametrize("kind", list(AttackKind))
    def test_zero_budget_equals_clean(self, kind, mlp_model, conv_model, test_xy):
        x, y = test_xy
        cfg = AttackConfig(epsilon=0.0, random_start=True)
        subs = [conv_model, mlp_model] if kind == AttackKind.ENS else conv_model
        assert robust_accuracy(mlp_model, subs, x, y, kind, cfg) == accuracy(mlp_model, x, y)

    def test_white_box_pgd_hurts_undefended_linear_model(self, tiny_clean, test_xy):
        arch = ArchSpec(kind=ArchKind.LINEAR, input_shape=(1, 6, 6), num_classes=3)
        model, _ = pretrain(init_model(arch, seed=0), tiny_clean, TrainConfig(epochs=5, batch_size=16, lr=0.1))
        x, y = test_xy
        clean = accuracy(model, x, y)
        attacked = robust_accuracy(model, model, x, y, AttackKind.PGD, AttackConfig(epsilon=0.3, steps=10))
        assert attacked < clean

    async def test_several_attacks_concurrently(self, mlp_model, conv_model, test_xy):
        x, y = test_xy
        results = await evaluate_attacks_async(mlp_model, [conv_model], x, y, kinds=["pgd", "fgsm", "mim"],
                                               cfg=AttackConfig(steps=2), threads=3)
        assert set(results) == {"pgd", "fgsm", "mim"}
        assert all(0.0 <= v <= 100.0 for v in results.values())


class TestCorruptionAccuracy:
    def test_sweep(self, mlp_model, test_xy):
        x, y = test_xy
        sweep = corruption_accuracy(mlp_model, x, y, "gaussian_noise", severities=(3, 0, 1), seed=4)
        assert list(sweep) == [0, 1, 3]
        assert sweep[0] == accuracy(mlp_model, x, y)
        assert sweep == corruption_accuracy(mlp_model, x, y, "gaussian_noise", severities=(0, 1, 3), seed=4)


class TestDataAmount:
    def test_one_shot_versus_per_epoch(self):
        drl = DataAmountPlan(kind="drl", clean=50_000, copies=2)
        at = DataAmountPlan(kind="at", clean=50_000, epochs=100)
        assert data_amount(drl) == 150_000 and format_amount(data_amount(drl)) == "0.15M"
        assert data_amount(at) == 5_000_000 and format_amount(data_amount(at)) == "5M"

    def test_desk_scale_numbers(self):
        assert data_amount(DataAmountPlan(kind="drl", clean=2_000, copies=2)) == 6_000
        assert data_amount(DataAmountPlan(kind="at", clean=2_000, epochs=30)) == 60_000

    def test_drl_amount_ignores_epochs(self, mlp_model, drl_dataset):
        _, short = train(mlp_model, drl_dataset, TrainConfig(epochs=1, batch_size=16))
        _, long = train(mlp_model, drl_dataset, TrainConfig(epochs=3, batch_size=16))
        assert data_amount(short) == data_amount(long) == data_amount(drl_dataset) == 60

    def test_at_amount_grows_with_epochs(self, mlp_model, test_xy):
        x, y = test_xy
        attack = AttackConfig(steps=2)
        _, two = train_pgd_at(mlp_model, x, y, TrainConfig(epochs=2, batch_size=10), attack)
        _, four = train_pgd_at(mlp_model, x, y, TrainConfig(epochs=4, batch_size=10), attack)
        assert data_amount(two) == 2 * len(y)
        assert data_amount(four) == 4 * len(y)
        assert len(four.epochs) == 4


class TestThreatMatrix:
    @pytest.fixture
    def provenance(self, tiny_clean, drl_dataset):
        cfg = TrainConfig(epochs=1, batch_size=16, objective=ObjectiveKind.DRL_AR, lam=1e-3)
        return TargetProvenance(arch=IMAGE_ARCH, clean=tiny_clean, drl=drl_dataset, train_cfg=cfg, seed=7)

    def test_realistic_plan(self, provenance):
        plan = substitute_plan(ThreatSpec(), provenance)
        assert plan.setting == "realistic"
        assert plan.arch == alternate_arch(IMAGE_ARCH)
        assert plan.data == "D"
        assert plan.train_cfg.objective == ObjectiveKind.CE_ONLY
        assert plan.train_cfg.epochs == provenance.train_cfg.epochs

    def test_full_knowledge_of_data_and_loss(self, provenance):
        plan = substitute_plan(ThreatSpec(knows_dataset=True, knows_loss=True), provenance)
        assert plan.setting == "D'&L"
        assert plan.data == "D'"
        assert plan.train_cfg.objective == ObjectiveKind.DRL_AR
        assert plan.arch == alternate_arch(IMAGE_ARCH)

    def test_known_architecture(self, provenance):
        assert substitute_plan(ThreatSpec(knows_arch=True), provenance).arch == IMAGE_ARCH

    def test_plan_is_pure(self, provenance):
        spec = ThreatSpec(knows_loss=True)
        assert substitute_plan(spec, provenance) == substitute_plan(spec, provenance)

    def test_missing_provenance(self, provenance):
        no_drl = TargetProvenance(arch=IMAGE_ARCH, clean=provenance.clean, train_cfg=provenance.train_cfg)
        with pytest.raises(ProvenanceError):
            substitute_plan(ThreatSpec(knows_dataset=True), no_drl)
        with pytest.raises(ProvenanceError):
            substitute_plan(ThreatSpec(), TargetProvenance())

    def test_seven_rows(self, provenance, test_xy):
        x, y = test_xy
        target = init_model(IMAGE_ARCH, seed=3)
        rows = threat_matrix_eval(target, provenance, x, y, attack=AttackConfig(steps=2), threads=2)
        assert [r.setting for r in rows] == ["realistic", "M", "D'", "L", "M&D'", "M&L", "D'&L"]
        assert all(0.0 <= r.robust_accuracy <= 100.0 for r in rows)


class TestReports:
    @pytest.fixture
    def report(self, mlp_model, conv_model, test_xy):
        x, y = test_xy
        return build_report("drl", mlp_model, [conv_model], x, y, kinds=["pgd", "fgsm"],
                            attack=AttackConfig(steps=2), corruption={0: 50.0, 3: 40.0}, amount=6_000, threads=2)

    def test_round_trip(self, report, tmp_path):
        assert load_report(save_report(report, tmp_path / "drl.json")) == report

    def test_summary_files(self, report, tmp_path):
        assert summary_columns([report]) == ["defense", "clean", "ra_fgsm", "ra_pgd", "std", "data_amount"]
        with write_summary_csv([report], tmp_path / "summary.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[1][0] == "drl" and rows[1][-1] == "0.006M"
        table = write_summary_table([report], tmp_path / "summary.txt").read_text().splitlines()
        assert table[0].split() == summary_columns([report])
        assert len(table) == 2

    def test_missing_and_invalid(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_report(tmp_path / "absent.json")
        (tmp_path / "bad.json").write_text('{"defense": "", "clean_accuracy": 150}')
        with pytest.raises(EvaluationError):
            load_report(tmp_path / "bad.json")

    def test_report_rejects_out_of_range_accuracy(self):
        with pytest.raises(ValueError):
            EvalReport(defense="x", clean_accuracy=10.0, robust_accuracy={"pgd": 101.0})


def test_series_round_trip(tmp_path):
    path = write_series(tmp_path / "curve.txt", [(1, 50.0), (2, 75.5)])
    assert read_series(path) == [(1.0, 50.0), (2.0, 75.5)]
