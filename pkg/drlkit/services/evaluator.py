"""
Evaluation: clean and transfer-attack accuracy, class-wise fairness,
corruption sweeps, data-amount accounting and the threat-model matrix.

All evaluation is read-only over models and datasets, so per-attack and
per-setting runs are fanned out to worker threads.
"""

import asyncio
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from drlkit.core.tensor import backward, check_labels, softmax_ce
from drlkit.models.dataset import AugmentedDataset, Example, stack_images, stack_labels
from drlkit.models.schemas import (
    ArchSpec,
    AttackConfig,
    AttackKind,
    EvalReport,
    ObjectiveKind,
    ThreatRow,
    ThreatSpec,
    TrainConfig,
    TransformKind,
    TransformSpec,
)
from drlkit.services.attack_service import pgd, run_attack
from drlkit.services.model_zoo import Model, alternate_arch, forward_logits, init_model
from drlkit.services.trainer import EpochRecord, SGDMomentum, TrainLog, train
from drlkit.services.transforms import corrupt_transform
from drlkit.utils.errors import (
    DivergenceError,
    EvaluationError,
    MissingArtifactError,
    NonFiniteError,
    ProvenanceError,
)
from drlkit.utils.seeding import derive_seed, substream

logger = logging.getLogger(__name__)

EVAL_BATCH = 500
ATTACK_ORDER = [kind.value for kind in AttackKind]


def _arrays(x, y=None) -> tuple[np.ndarray, np.ndarray]:
    """Accept either a sequence of examples or an (images, labels) pair."""
    if y is None:
        examples = list(x)
        return stack_images(examples), stack_labels(examples)
    return np.asarray(x), np.asarray(y, dtype=np.int64).reshape(-1)


def accuracy(model: Model, x: Union[np.ndarray, Sequence[Example]], y=None) -> float:
    """100 · correct / total under argmax prediction."""
    images, labels = _arrays(x, y)
    if labels.size == 0:
        raise EvaluationError("accuracy needs at least one example")
    labels = check_labels(labels, model.arch.num_classes, images.shape[0])
    return 100.0 * float(np.mean(model.predict(images) == labels))


def per_class_accuracy(model: Model, x, y=None, num_classes: Optional[int] = None) -> list[float]:
    images, labels = _arrays(x, y)
    num_classes = num_classes or model.arch.num_classes
    labels = check_labels(labels, num_classes, images.shape[0])
    preds = model.predict(images)
    out = []
    for c in range(num_classes):
        mask = labels == c
        if not mask.any():
            raise EvaluationError(f"class {c} has no examples")
        out.append(100.0 * float(np.mean(preds[mask] == c)))
    return out


def classwise_std(model: Model, x, y=None, num_classes: Optional[int] = None) -> float:
    """Population standard deviation of the per-class accuracies."""
    return float(np.std(per_class_accuracy(model, x, y, num_classes)))


def _attack_batches(kind: AttackKind, substitutes: list[Model], images: np.ndarray,
                    labels: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    models = substitutes if len(substitutes) > 1 else substitutes[0]
    chunks = []
    for start in range(0, images.shape[0], EVAL_BATCH):
        chunk_cfg = cfg.model_copy(update={"seed": derive_seed(cfg.seed, f"eval/chunk{start}")})
        result = run_attack(kind, models, images[start:start + EVAL_BATCH], labels[start:start + EVAL_BATCH], chunk_cfg)
        chunks.append(result.adversarial)
    return np.concatenate(chunks)


def robust_accuracy(
    target: Model,
    substitutes: Union[Model, Sequence[Model]],
    x,
    y=None,
    kind: Union[AttackKind, str] = AttackKind.PGD,
    cfg: Optional[AttackConfig] = None,
) -> float:
    """Accuracy of ``target`` on examples attacked through the substitute(s)."""
    subs = [substitutes] if isinstance(substitutes, Model) else list(substitutes)
    images, labels = _arrays(x, y)
    if labels.size == 0:
        raise EvaluationError("robust accuracy needs at least one example")
    cfg = cfg or AttackConfig(random_start=True)
    kind = AttackKind(kind)
    if any(sub is target for sub in subs):
        logger.warning("Substitute is the target model: %s evaluation is white-box", kind.value)
    adversarial = _attack_batches(kind, subs, images, labels, cfg)
    return accuracy(target, adversarial, labels)


async def evaluate_attacks_async(
    target: Model,
    substitutes: Sequence[Model],
    x,
    y=None,
    kinds: Sequence[Union[AttackKind, str]] = (AttackKind.PGD,),
    cfg: Optional[AttackConfig] = None,
    threads: int = 4,
) -> dict[str, float]:
    """Robust accuracy for several attack kinds, one worker thread per kind."""
    images, labels = _arrays(x, y)
    gate = asyncio.Semaphore(threads)

    async def _one(kind: AttackKind) -> tuple[str, float]:
        async with gate:
            acc = await asyncio.to_thread(robust_accuracy, target, substitutes, images, labels, kind, cfg)
        logger.info("Robust accuracy under %s: %.2f%%", kind.value, acc)
        return kind.value, acc

    results = await asyncio.gather(*(_one(AttackKind(k)) for k in kinds))
    return dict(results)


def evaluate_attacks(target: Model, substitutes: Sequence[Model], x, y=None, **kwargs) -> dict[str, float]:
    return asyncio.run(evaluate_attacks_async(target, substitutes, x, y, **kwargs))


def corruption_accuracy(
    model: Model,
    x,
    y=None,
    kind: Union[TransformKind, str] = TransformKind.GAUSSIAN_NOISE,
    severities: Sequence[int] = (0, 1, 2, 3, 4, 5),
    seed: int = 0,
) -> dict[int, float]:
    """Accuracy after ``corrupt_transform`` at every severity, in severity order."""
    images, labels = _arrays(x, y)
    out = {}
    for severity in sorted(severities):
        spec = TransformSpec(kind=kind, severity=severity, seed=seed)
        out[severity] = accuracy(model, corrupt_transform(images, spec), labels)
    return out


# ----------------------------------------------------------------------
# Data-amount accounting
# ----------------------------------------------------------------------

class DataAmountPlan(BaseModel):
    """Images a training recipe consumes.

    drl: clean + one-shot adversarial copies, counted once.
    at:  examples regenerated every epoch.
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["drl", "at"]
    clean: int = Field(..., ge=0)
    copies: int = Field(default=1, ge=0)  # adversarial copies per clean image (drl)
    epochs: int = Field(default=1, ge=0)  # at only

    @property
    def amount(self) -> int:
        if self.kind == "drl":
            return self.clean * (1 + self.copies)
        return self.clean * self.epochs


def data_amount(source: Union[DataAmountPlan, TrainLog, AugmentedDataset]) -> int:
    if isinstance(source, DataAmountPlan):
        return source.amount
    return int(source.data_amount)


def format_amount(count: int) -> str:
    """Render an image count in millions: 150000 -> '0.15M', 5000000 -> '5M'."""
    return f"{count / 1e6:g}M"


# ----------------------------------------------------------------------
# PGD adversarial-training baseline
# ----------------------------------------------------------------------

def train_pgd_at(
    model: Model,
    x,
    y=None,
    cfg: Optional[TrainConfig] = None,
    attack: Optional[AttackConfig] = None,
) -> tuple[Model, TrainLog]:
    """Per-epoch PGD adversarial training, kept for comparison rows only.

    Every batch is re-attacked against the current parameters, so the data
    amount grows linearly with the epoch count.
    """
    images, labels = _arrays(x, y)
    cfg = cfg or TrainConfig()
    attack = attack or AttackConfig(random_start=True)
    model = model.clone()
    n = images.shape[0]
    plan = DataAmountPlan(kind="at", clean=n, epochs=cfg.epochs)
    log = TrainLog(objective=ObjectiveKind.CE_ONLY, lam=0.0, generated_data=plan.amount, data_amount=plan.amount)
    optimizer = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = substream(cfg.seed, "shuffle")

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            step_cfg = attack.model_copy(update={"seed": derive_seed(cfg.seed, f"at/epoch{epoch}/step{step}")})
            adv = pgd(model, images[idx], labels[idx], step_cfg).adversarial
            model.zero_grad()
            try:
                logits = forward_logits(model, adv)
                loss = softmax_ce(logits, labels[idx])
                backward(loss)
                optimizer.step(model.params)
            except NonFiniteError as exc:
                raise DivergenceError(f"PGD-AT diverged at epoch {epoch}: {exc}") from exc
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        record = EpochRecord(epoch=epoch + 1, loss=loss_sum / n, ce=loss_sum / n, ar=0.0,
                             train_accuracy=100.0 * correct / n, selected=n, mean_score=0.0)
        log.epochs.append(record)
        logger.info("pgd-at epoch %d/%d loss=%.4f acc=%.2f", record.epoch, cfg.epochs, record.loss,
                    record.train_accuracy, extra={"metrics": record.model_dump()})
    return model, log


# ----------------------------------------------------------------------
# Threat-model matrix
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TargetProvenance:
    """What went into the target: architecture, clean data D, augmented data D′, loss."""
    arch: Optional[ArchSpec] = None
    clean: Optional[AugmentedDataset] = None
    drl: Optional[AugmentedDataset] = None
    train_cfg: Optional[TrainConfig] = None
    seed: int = 0


class SubstitutePlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    setting: str
    arch: ArchSpec
    data: Literal["D", "D'"]
    train_cfg: TrainConfig
    seed: int


def substitute_plan(spec: ThreatSpec, provenance: TargetProvenance) -> SubstitutePlan:
    """How the adversary of ``spec`` builds its substitute; a pure function."""
    if provenance.arch is None or provenance.clean is None or provenance.train_cfg is None:
        raise ProvenanceError("provenance must name the target architecture, clean data and training config")
    if spec.knows_dataset and provenance.drl is None:
        raise ProvenanceError(f"setting {spec.label} needs the augmented dataset D'")

    seed = derive_seed(provenance.seed, f"threat/{spec.label}")
    target_cfg = provenance.train_cfg
    if spec.knows_loss:
        train_cfg = target_cfg.model_copy(update={"seed": seed})
    else:
        train_cfg = TrainConfig(
            epochs=target_cfg.epochs,
            batch_size=target_cfg.batch_size,
            lr=target_cfg.lr,
            momentum=target_cfg.momentum,
            weight_decay=target_cfg.weight_decay,
            objective=ObjectiveKind.CE_ONLY,
            lam=0.0,
            seed=seed,
        )
    return SubstitutePlan(
        setting=spec.label,
        arch=provenance.arch if spec.knows_arch else alternate_arch(provenance.arch),
        data="D'" if spec.knows_dataset else "D",
        train_cfg=train_cfg,
        seed=seed,
    )


def train_substitute(plan: SubstitutePlan, provenance: TargetProvenance) -> Model:
    dataset = provenance.drl if plan.data == "D'" else provenance.clean
    cfg = plan.train_cfg
    if cfg.select_size is not None and cfg.select_size > dataset.num_pairs:
        cfg = cfg.model_copy(update={"select_size": None})
    model, _ = train(init_model(plan.arch, plan.seed), dataset, cfg)
    return model


async def threat_matrix_eval_async(
    target: Model,
    provenance: TargetProvenance,
    x,
    y=None,
    specs: Optional[Sequence[ThreatSpec]] = None,
    attack: Optional[AttackConfig] = None,
    threads: int = 2,
) -> list[ThreatRow]:
    """Train one substitute per setting and attack the target with PGD through it."""
    images, labels = _arrays(x, y)
    specs = list(specs) if specs is not None else ThreatSpec.enumerate()
    plans = [substitute_plan(spec, provenance) for spec in specs]
    attack = attack or AttackConfig(random_start=True)
    gate = asyncio.Semaphore(threads)

    def _evaluate(spec: ThreatSpec, plan: SubstitutePlan) -> ThreatRow:
        substitute = train_substitute(plan, provenance)
        acc = robust_accuracy(target, substitute, images, labels, AttackKind.PGD, attack)
        logger.info("Threat setting %s: robust accuracy %.2f%%", spec.label, acc)
        return ThreatRow(
            setting=spec.label,
            knows_arch=spec.knows_arch,
            knows_dataset=spec.knows_dataset,
            knows_loss=spec.knows_loss,
            substitute_arch=plan.arch.kind,
            substitute_data=plan.data,
            substitute_objective=plan.train_cfg.objective,
            robust_accuracy=acc,
        )

    async def _run(spec, plan):
        async with gate:
            return await asyncio.to_thread(_evaluate, spec, plan)

    return list(await asyncio.gather(*(_run(s, p) for s, p in zip(specs, plans))))


def threat_matrix_eval(target: Model, provenance: TargetProvenance, x, y=None, **kwargs) -> list[ThreatRow]:
    return asyncio.run(threat_matrix_eval_async(target, provenance, x, y, **kwargs))


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

def build_report(
    defense: str,
    target: Model,
    substitutes: Sequence[Model],
    x,
    y=None,
    kinds: Sequence[Union[AttackKind, str]] = (AttackKind.PGD,),
    attack: Optional[AttackConfig] = None,
    corruption: Optional[dict[int, float]] = None,
    amount: int = 0,
    threat_rows: Optional[list[ThreatRow]] = None,
    threads: int = 4,
) -> EvalReport:
    images, labels = _arrays(x, y)
    per_class = per_class_accuracy(target, images, labels)
    return EvalReport(
        defense=defense,
        clean_accuracy=accuracy(target, images, labels),
        robust_accuracy=evaluate_attacks(target, substitutes, images, labels, kinds=kinds, cfg=attack,
                                         threads=threads),
        per_class_accuracy=per_class,
        classwise_std=float(np.std(per_class)),
        corruption_accuracy=corruption or {},
        data_amount=amount,
        threat_rows=threat_rows or [],
    )


def save_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"report not found: {path}")
    try:
        return EvalReport.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise EvaluationError(f"{path}: invalid report ({exc.error_count()} errors)") from exc


def summary_columns(reports: Sequence[EvalReport]) -> list[str]:
    seen = {key for r in reports for key in r.robust_accuracy}
    attacks = [k for k in ATTACK_ORDER if k in seen] + sorted(seen - set(ATTACK_ORDER))
    return ["defense", "clean", *[f"ra_{k}" for k in attacks], "std", "data_amount"]


def summary_rows(reports: Sequence[EvalReport]) -> list[list[str]]:
    columns = summary_columns(reports)
    attacks = [c[3:] for c in columns if c.startswith("ra_")]
    rows = []
    for r in reports:
        ra = [f"{r.robust_accuracy[k]:.2f}" if k in r.robust_accuracy else "-" for k in attacks]
        rows.append([r.defense, f"{r.clean_accuracy:.2f}", *ra, f"{r.classwise_std:.2f}",
                     format_amount(r.data_amount)])
    return rows


def write_summary_csv(reports: Sequence[EvalReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(summary_columns(reports))
        writer.writerows(summary_rows(reports))
    return path


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
    lines = ["  ".join(str(cell).rjust(w) for cell, w in zip(line, widths)) for line in [header, *rows]]
    return "\n".join(lines) + "\n"


def write_summary_table(reports: Sequence[EvalReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(summary_columns(reports), summary_rows(reports)))
    return path


def write_threat_table(rows: Sequence[ThreatRow], path: Union[str, Path]) -> Path:
    header = ["setting", "arch", "data", "objective", "robust_acc"]
    body = [[r.setting, r.substitute_arch.value, r.substitute_data, r.substitute_objective.value,
             f"{r.robust_accuracy:.2f}"] for r in rows]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(header, body))
    return path


def write_series(path: Union[str, Path], points: Sequence[tuple[float, float]]) -> Path:
    """Plot-ready series: one 'x y' pair per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{x:g} {y:.6f}\n" for x, y in points))
    return path


def read_series(path: Union[str, Path]) -> list[tuple[float, float]]:
    points = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            x, y = line.split()
            points.append((float(x), float(y)))
    return points
