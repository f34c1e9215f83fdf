"""
Pipeline commands behind the CLI: pretrain, gen, train, eval, report.

Experiment directory:
    config.toml / config.json   snapshot of the file given and the resolved config
    data/        train, test (clean, self-paired) and drl (augmented) datasets
    checkpoints/ target_init, target_ce, substitute{i}, eval_substitute, target_drl, target_at
    logs/        train logs (JSON) and the selection trace
    reports/     one EvalReport JSON per defense, summary.csv, summary.txt, threats.txt
    series/      accuracy-vs-epoch curves
"""

import json
import logging
import shutil
from pathlib import Path
from typing import Optional, Union

from drlkit.models.dataset import AugmentedDataset, Example, stack_images, stack_labels
from drlkit.models.schemas import ArchKind, ArchSpec, AttackConfig
from drlkit.models.settings import ExperimentConfig
from drlkit.services.dataset_forge import (
    build_drl_dataset,
    default_threads,
    ingest_synthetic,
    load_dataset,
    save_dataset,
)
from drlkit.services.evaluator import (
    DataAmountPlan,
    TargetProvenance,
    build_report,
    corruption_accuracy,
    data_amount,
    load_report,
    save_report,
    threat_matrix_eval,
    train_pgd_at,
    write_series,
    write_summary_csv,
    write_summary_table,
    write_threat_table,
)
from drlkit.services.model_zoo import Model, alternate_arch, init_model, load_checkpoint, save_checkpoint
from drlkit.services.selector import SelectionTrace
from drlkit.services.synthetic_task import make_image_task
from drlkit.services.trainer import TrainLog, train
from drlkit.utils.errors import MissingArtifactError
from drlkit.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

SUBDIRS = ("checkpoints", "data", "logs", "reports", "series")


class ExperimentLayout:
    """Paths inside one experiment directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def prepare(self) -> "ExperimentLayout":
        for name in SUBDIRS:
            (self.root / name).mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def data(self, name: str) -> Path:
        return self.root / "data" / name

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def series(self) -> Path:
        return self.root / "series"


def snapshot_config(cfg: ExperimentConfig, source: Optional[Union[str, Path]] = None) -> ExperimentLayout:
    """Create the experiment directory and record the config it runs with."""
    layout = ExperimentLayout(cfg.out_dir).prepare()
    if source is not None:
        shutil.copyfile(source, layout.root / "config.toml")
    (layout.root / "config.json").write_text(cfg.model_dump_json(indent=2))
    return layout


def _threads(cfg: ExperimentConfig) -> int:
    return cfg.threads or default_threads()


def _arch(cfg: ExperimentConfig, kind: ArchKind) -> ArchSpec:
    task = cfg.data.task
    return ArchSpec(kind=kind, input_shape=(task.channels, task.size, task.size),
                    num_classes=task.num_classes, hidden=cfg.models.hidden, channels=cfg.models.channels)


def _require_checkpoint(layout: ExperimentLayout, name: str) -> Model:
    path = layout.checkpoint(name)
    if not path.is_file():
        raise MissingArtifactError(f"missing checkpoint {path}; run the earlier pipeline stage first")
    return load_checkpoint(path)


def _save_log(layout: ExperimentLayout, name: str, log: TrainLog) -> None:
    (layout.logs / f"{name}.json").write_text(log.model_dump_json(indent=2))
    write_series(layout.series / f"{name}_train_accuracy.txt", log.accuracy_series())


def clean_data(cfg: ExperimentConfig, layout: ExperimentLayout) -> tuple[AugmentedDataset, AugmentedDataset]:
    """(train, test) clean datasets, materialising the synthetic task if needed."""
    train_dir = Path(cfg.data.train_path) if cfg.data.train_path else layout.data("train")
    test_dir = Path(cfg.data.test_path) if cfg.data.test_path else layout.data("test")
    if (train_dir / "manifest.json").is_file() and (test_dir / "manifest.json").is_file():
        return load_dataset(train_dir), load_dataset(test_dir)
    if not cfg.data.synthetic:
        raise MissingArtifactError(f"no clean data at {train_dir} / {test_dir} and synthetic data is disabled")

    train_examples, test_examples = make_image_task(cfg.data.task, derive_seed(cfg.seed, "data"))
    manifest = {"task": cfg.data.task.model_dump(mode="json"), "data_amount": len(train_examples)}
    train_ds = AugmentedDataset.self_paired(train_examples, manifest)
    test_ds = AugmentedDataset.self_paired(test_examples, {"task": manifest["task"]})
    save_dataset(train_ds, train_dir)
    save_dataset(test_ds, test_dir)
    return train_ds, test_ds


def _xy(dataset: AugmentedDataset):
    return stack_images(dataset.examples), stack_labels(dataset.examples)


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, layout: ExperimentLayout) -> dict[str, Path]:
    """Normally trained target, forge substitutes and an independent eval substitute."""
    train_ds, _ = clean_data(cfg, layout)
    target_arch = _arch(cfg, cfg.models.target)
    jobs = {"target": (target_arch, derive_seed(cfg.seed, "init/target"))}
    for i, kind in enumerate(cfg.models.substitutes):
        jobs[f"substitute{i}"] = (_arch(cfg, kind), derive_seed(cfg.seed, f"init/substitute{i}"))
    jobs["eval_substitute"] = (alternate_arch(target_arch), derive_seed(cfg.seed, "init/eval_substitute"))

    written = {}
    for name, (arch, seed) in jobs.items():
        model = init_model(arch, seed)
        if name == "target":
            written["target_init"] = save_checkpoint(model, layout.checkpoint("target_init"))
            name = "target_ce"
        pretrain_cfg = cfg.pretrain.model_copy(update={"seed": derive_seed(cfg.seed, f"pretrain/{name}")})
        trained, log = train(model, train_ds, pretrain_cfg)
        written[name] = save_checkpoint(trained, layout.checkpoint(name))
        _save_log(layout, f"pretrain_{name}", log)
        logger.info("Pretrained %s (%s)", name, arch.kind.value)
    return written


def cmd_gen(cfg: ExperimentConfig, layout: ExperimentLayout) -> Path:
    """Forge the one-shot augmented dataset from the pretrained substitutes."""
    train_ds, _ = clean_data(cfg, layout)
    substitutes = [_require_checkpoint(layout, f"substitute{i}") for i in range(len(cfg.models.substitutes))]
    pool: list[Example] = list(train_ds.examples)
    if cfg.data.synthetic_path:
        offset = max(ex.id for ex in pool) + 1 if pool else 0
        pool += ingest_synthetic(cfg.data.synthetic_path, cfg.data.task.num_classes, id_offset=offset)

    provenance = {
        "substitute_checkpoints": [str(layout.checkpoint(f"substitute{i}")) for i in range(len(substitutes))],
        "clean_source": str(layout.data("train")),
        "root_seed": cfg.seed,
    }
    dataset = build_drl_dataset(pool, substitutes, cfg.forge.attacks, threads=_threads(cfg),
                                chunk_size=cfg.forge.chunk_size, provenance=provenance,
                                seed=derive_seed(cfg.seed, "forge"))
    path = save_dataset(dataset, layout.data("drl"))
    logger.info("Forged %d examples (%d pairs), hash %s", len(dataset), dataset.num_pairs,
                dataset.content_hash()[:12])
    return path


def _load_drl(layout: ExperimentLayout) -> AugmentedDataset:
    path = layout.data("drl")
    if not (path / "manifest.json").is_file():
        raise MissingArtifactError(f"no augmented dataset at {path}; run `gen` first")
    return load_dataset(path)


def cmd_train(cfg: ExperimentConfig, layout: ExperimentLayout) -> Path:
    """Train the target on the augmented dataset."""
    dataset = _load_drl(layout)
    start = "target_ce" if cfg.from_pretrained else "target_init"
    model = _require_checkpoint(layout, start)
    train_cfg = cfg.train.model_copy(update={"seed": derive_seed(cfg.seed, "train/target")})
    trace = SelectionTrace(layout.logs / "selection_trace.txt")
    trained, log = train(model, dataset, train_cfg, trace=trace)
    _save_log(layout, "train_drl", log)
    return save_checkpoint(trained, layout.checkpoint("target_drl"))


def eval_attack_config(cfg: ExperimentConfig) -> AttackConfig:
    """The configured evaluation attack, reseeded from the root seed."""
    attack = cfg.eval.attack
    return attack.model_copy(update={"seed": derive_seed(cfg.seed, f"attack/eval/{attack.seed}")})


def cmd_eval(cfg: ExperimentConfig, layout: ExperimentLayout) -> list[Path]:
    """Evaluate every available defense against the independent eval substitute."""
    train_ds, test_ds = clean_data(cfg, layout)
    x_test, y_test = _xy(test_ds)
    substitute = _require_checkpoint(layout, "eval_substitute")
    threads = _threads(cfg)
    attack = eval_attack_config(cfg)
    n_clean = len(train_ds.examples)

    defenses: dict[str, tuple[Model, int]] = {
        "ce": (_require_checkpoint(layout, "target_ce"), data_amount(DataAmountPlan(kind="drl", clean=n_clean, copies=0)))
    }
    if layout.checkpoint("target_drl").is_file():
        drl = _load_drl(layout)
        defenses["drl"] = (load_checkpoint(layout.checkpoint("target_drl")), data_amount(drl))
    if cfg.eval.baseline_at:
        at_cfg = cfg.train.model_copy(update={"epochs": cfg.eval.at_epochs, "seed": derive_seed(cfg.seed, "train/at")})
        x_train, y_train = _xy(train_ds)
        at_model, at_log = train_pgd_at(_require_checkpoint(layout, "target_ce"), x_train, y_train,
                                        at_cfg, attack)
        save_checkpoint(at_model, layout.checkpoint("target_at"))
        _save_log(layout, "train_at", at_log)
        defenses["pgd_at"] = (at_model, at_log.data_amount)

    written = []
    for name, (model, amount) in defenses.items():
        threat_rows = None
        if name == "drl" and cfg.eval.threat_matrix:
            provenance = TargetProvenance(
                arch=model.arch, clean=train_ds, drl=_load_drl(layout), train_cfg=cfg.train,
                seed=derive_seed(cfg.seed, "threat"),
            )
            threat_rows = threat_matrix_eval(model, provenance, x_test, y_test, specs=cfg.eval.threat_specs,
                                             attack=attack, threads=threads)
            write_threat_table(threat_rows, layout.reports / "threats.txt")
        corruption = corruption_accuracy(model, x_test, y_test, cfg.eval.corruption_kind, cfg.eval.severities,
                                         seed=derive_seed(cfg.seed, "transform/eval"))
        report = build_report(name, model, [substitute], x_test, y_test, kinds=cfg.eval.attacks,
                              attack=attack, corruption=corruption, amount=amount,
                              threat_rows=threat_rows, threads=threads)
        written.append(save_report(report, layout.reports / f"{name}.json"))
        logger.info("Evaluated %s: clean %.2f%%, robust %s", name, report.clean_accuracy,
                    json.dumps(report.robust_accuracy))
    return written


def cmd_report(root: Union[str, Path]) -> Path:
    """Consolidate every EvalReport under ``root/reports`` into one table."""
    layout = ExperimentLayout(root)
    files = sorted(layout.reports.glob("*.json")) if layout.reports.is_dir() else []
    if not files:
        raise MissingArtifactError(f"no evaluation reports under {layout.reports}")
    reports = [load_report(path) for path in files]
    write_summary_table(reports, layout.reports / "summary.txt")
    path = write_summary_csv(reports, layout.reports / "summary.csv")

    layout.series.mkdir(parents=True, exist_ok=True)
    for report in reports:
        if report.corruption_accuracy:
            points = sorted(report.corruption_accuracy.items())
            write_series(layout.series / f"{report.defense}_corruption.txt", points)
    logger.info("Summarised %d reports into %s", len(reports), path)
    return path
