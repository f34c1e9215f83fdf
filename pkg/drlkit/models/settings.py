"""
Experiment configuration.

Precedence, highest first: CLI flags, DRL_* environment variables (nested
with "__", e.g. DRL_TRAIN__EPOCHS=5), a .env file, the --config TOML file,
then the defaults below.
"""

from contextvars import ContextVar
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from drlkit.models.schemas import (
    ArchKind,
    AttackConfig,
    AttackKind,
    AttackSpec,
    ObjectiveKind,
    SyntheticTaskSpec,
    ThreatSpec,
    TrainConfig,
    TransformKind,
)
from drlkit.utils.errors import ConfigError, MissingArtifactError

_toml_path: ContextVar[Optional[Path]] = ContextVar("drl_toml_path", default=None)


class DataSettings(BaseModel):
    synthetic: bool = True  # materialise the synthetic task when no clean data exists
    task: SyntheticTaskSpec = Field(default_factory=SyntheticTaskSpec)
    train_path: Optional[str] = None  # dataset directories in the forge format
    test_path: Optional[str] = None
    synthetic_path: Optional[str] = None  # externally generated clean data to ingest


class ModelSettings(BaseModel):
    target: ArchKind = ArchKind.SMALL_CONV
    substitutes: list[ArchKind] = Field(default_factory=lambda: [ArchKind.MLP], min_length=1)
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (8, 16)


class ForgeSettings(BaseModel):
    attacks: list[AttackSpec] = Field(
        default_factory=lambda: [AttackSpec(kind=AttackKind.PGD), AttackSpec(kind=AttackKind.FGSM)],
        min_length=1,
    )
    chunk_size: int = Field(default=256, ge=1)


class EvalSettings(BaseModel):
    attacks: list[AttackKind] = Field(default_factory=lambda: [AttackKind.PGD, AttackKind.FGSM])
    attack: AttackConfig = Field(default_factory=lambda: AttackConfig(random_start=True))
    threat_matrix: bool = False
    threat_specs: Optional[list[ThreatSpec]] = None
    corruption_kind: TransformKind = TransformKind.GAUSSIAN_NOISE
    severities: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    baseline_at: bool = False
    at_epochs: int = Field(default=5, ge=0)


def _default_pretrain() -> TrainConfig:
    return TrainConfig(epochs=20, objective=ObjectiveKind.CE_ONLY, lr=0.05, batch_size=128)


def _default_train() -> TrainConfig:
    return TrainConfig(epochs=10, objective=ObjectiveKind.DRL_AR, lr=0.01, batch_size=128)


class ExperimentConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="DRL_",
        env_nested_delimiter="__",
        env_file=".env",
        extra="ignore",
    )

    name: str = "desk"
    seed: int = Field(default=0, ge=0)
    out: str = "runs/desk"
    threads: Optional[int] = Field(default=None, ge=1)
    from_pretrained: bool = True  # DRL training starts from the normally trained target

    data: DataSettings = Field(default_factory=DataSettings)
    models: ModelSettings = Field(default_factory=ModelSettings)
    pretrain: TrainConfig = Field(default_factory=_default_pretrain)
    forge: ForgeSettings = Field(default_factory=ForgeSettings)
    train: TrainConfig = Field(default_factory=_default_train)
    eval: EvalSettings = Field(default_factory=EvalSettings)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        sources = [init_settings, env_settings, dotenv_settings]
        toml_file = _toml_path.get()
        if toml_file is not None:
            sources.append(TomlConfigSettingsSource(settings_cls, toml_file=toml_file))
        return tuple(sources)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def load_experiment(path: Optional[Union[str, Path]] = None, **overrides) -> ExperimentConfig:
    """Build the experiment config from ``path`` plus environment and overrides.

    ``None`` overrides are dropped so unset CLI flags never mask other sources.
    """
    overrides = {k: v for k, v in overrides.items() if v is not None}
    toml_file = None
    if path is not None:
        toml_file = Path(path)
        if not toml_file.is_file():
            raise MissingArtifactError(f"config file not found: {toml_file}")
    token = _toml_path.set(toml_file)
    try:
        return ExperimentConfig(**overrides)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    except ValueError as exc:  # TOML syntax errors
        raise ConfigError(f"unreadable config {toml_file}: {exc}") from exc
    finally:
        _toml_path.reset(token)
