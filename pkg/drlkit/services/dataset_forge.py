"""
Dataset forge: builds the one-shot augmented dataset and persists it.

The forge runs every requested (substitute, attack) combination over the
clean pool exactly once. Chunks are attacked on worker threads through
asyncio.to_thread; each chunk gets a seed derived from its position, so the
result is identical for any thread count.

On-disk layout (a directory):
    manifest.json   format, version, epsilon, examples with byte offsets,
                    pairs, provenance, sha256 of the blob
    images.bin      little-endian float32 image data, examples back to back
"""

import asyncio
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import psutil

from drlkit.models.dataset import AugmentedDataset, Example, Source, stack_images, stack_labels
from drlkit.models.schemas import AttackKind, AttackSpec
from drlkit.services.attack_service import run_attack
from drlkit.services.model_zoo import Model
from drlkit.utils.errors import (
    ChecksumMismatchError,
    ConfigError,
    DatasetFormatError,
    DatasetVersionError,
    LabelError,
    MissingArtifactError,
    PixelRangeError,
    ShapeError,
)
from drlkit.utils.seeding import derive_seed, substream

logger = logging.getLogger(__name__)

DATASET_FORMAT = "drl-dataset"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "images.bin"
DIGEST_KEY = "manifest_sha256"
DEFAULT_CHUNK_SIZE = 256


def default_threads() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


@dataclass(frozen=True)
class ForgeJob:
    """One (substitutes, attack) combination and the pool positions it covers."""
    substitutes: tuple[int, ...]
    attack: int
    positions: tuple[int, ...]

    def tag(self, spec: AttackSpec) -> str:
        return f"{spec.tag}@" + "+".join(f"sub{i}" for i in self.substitutes)


def _plan_jobs(
    pool_size: int,
    n_substitutes: int,
    attacks: Sequence[AttackSpec],
    combinations: Optional[Sequence[tuple[Optional[int], int]]],
    seed: int,
) -> list[ForgeJob]:
    """Expand the requested combinations into jobs.

    Default: every non-ensemble attack against every substitute, and each
    ensemble attack once against all substitutes. A combination whose
    substitute index is None means "all substitutes".
    """
    if combinations is None:
        combinations = []
        for j, spec in enumerate(attacks):
            if spec.kind == AttackKind.ENS:
                combinations.append((None, j))
            else:
                combinations.extend((i, j) for i in range(n_substitutes))

    everyone = tuple(range(n_substitutes))
    jobs = []
    for k, (sub, att) in enumerate(combinations):
        if not 0 <= att < len(attacks):
            raise ConfigError(f"combination {k} names attack {att}, only {len(attacks)} given")
        if sub is not None and not 0 <= sub < n_substitutes:
            raise ConfigError(f"combination {k} names substitute {sub}, only {n_substitutes} given")
        subs = everyone if sub is None or attacks[att].kind == AttackKind.ENS else (sub,)
        fraction = attacks[att].fraction
        if fraction >= 1.0:
            positions = tuple(range(pool_size))
        else:
            count = max(1, int(round(fraction * pool_size)))
            chosen = substream(seed, f"data/job{k}").permutation(pool_size)[:count]
            positions = tuple(int(p) for p in np.sort(chosen))
        jobs.append(ForgeJob(substitutes=subs, attack=att, positions=positions))
    return jobs


def snap_to_ball(adv: np.ndarray, parent: np.ndarray, eps: float, valid_range: tuple[float, float]) -> np.ndarray:
    """Round float64 adversarial images to float32 without leaving the ε-ball."""
    out = adv.astype(np.float32)
    parent = parent.astype(np.float32)
    for _ in range(2):
        gap = out.astype(np.float64) - parent.astype(np.float64)
        outside = np.abs(gap) > eps
        if not outside.any():
            break
        out[outside] = np.nextafter(out[outside], parent[outside])
    lo, hi = valid_range
    return np.clip(out, np.float32(lo), np.float32(hi))


def _attack_chunk(
    members: list[Model],
    spec: AttackSpec,
    images: np.ndarray,
    labels: np.ndarray,
    seed: int,
) -> np.ndarray:
    cfg = spec.config.model_copy(update={"seed": seed})
    result = run_attack(spec.kind, members if len(members) > 1 else members[0], images, labels, cfg)
    return snap_to_ball(result.adversarial, images, cfg.epsilon, cfg.valid_range)


async def build_drl_dataset_async(
    clean: Sequence[Example],
    substitutes: Sequence[Model],
    attacks: Sequence[AttackSpec],
    combinations: Optional[Sequence[tuple[Optional[int], int]]] = None,
    threads: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    provenance: Optional[dict[str, Any]] = None,
    seed: int = 0,
) -> AugmentedDataset:
    """Attack every pool example once per job and pair it with its parent."""
    if not substitutes:
        raise ConfigError("the forge needs at least one substitute model")
    if not attacks:
        raise ConfigError("the forge needs at least one attack")
    epsilons = {spec.config.epsilon for spec in attacks}
    if len(epsilons) != 1:
        raise ConfigError(f"all attacks must share one epsilon, got {sorted(epsilons)}")
    epsilon = epsilons.pop()

    pool = list(clean)
    for ex in pool:
        if ex.source == Source.ADVERSARIAL:
            raise ConfigError(f"example {ex.id} is already adversarial")
    images = stack_images(pool).astype(np.float64) if pool else np.zeros((0,))
    labels = stack_labels(pool)
    for i, model in enumerate(substitutes):
        if pool and tuple(images.shape[1:]) != tuple(model.arch.input_shape):
            raise ShapeError(
                f"substitute {i} expects {tuple(model.arch.input_shape)}, examples are {images.shape[1:]}"
            )

    jobs = _plan_jobs(len(pool), len(substitutes), attacks, combinations, seed)
    threads = threads or default_threads()
    gate = asyncio.Semaphore(threads)

    async def _run(job_idx: int, start: int, positions: np.ndarray) -> tuple[int, int, np.ndarray]:
        job = jobs[job_idx]
        members = [substitutes[i] for i in job.substitutes]
        chunk_seed = derive_seed(seed, f"attack/{attacks[job.attack].config.seed}/job{job_idx}/chunk{start}")
        async with gate:
            adv = await asyncio.to_thread(
                _attack_chunk, members, attacks[job.attack], images[positions], labels[positions], chunk_seed
            )
        return job_idx, start, adv

    tasks = []
    for job_idx, job in enumerate(jobs):
        positions = np.asarray(job.positions, dtype=np.int64)
        for start in range(0, len(positions), chunk_size):
            tasks.append(_run(job_idx, start, positions[start:start + chunk_size]))
    logger.info("Forging %d jobs in %d chunks on %d threads", len(jobs), len(tasks), threads)
    results = await asyncio.gather(*tasks)
    by_chunk = {(job_idx, start): adv for job_idx, start, adv in results}

    next_id = max((ex.id for ex in pool), default=-1) + 1
    adversarial: list[Example] = []
    pairs: list[tuple[int, int]] = []
    for job_idx, job in enumerate(jobs):
        spec = attacks[job.attack]
        tag = job.tag(spec)
        for start in range(0, len(job.positions), chunk_size):
            adv = by_chunk[(job_idx, start)]
            for offset, pos in enumerate(job.positions[start:start + chunk_size]):
                parent = pool[pos]
                adversarial.append(Example(
                    id=next_id, image=adv[offset], label=parent.label, source=Source.ADVERSARIAL,
                    parent_id=parent.id, attack_tag=tag,
                ))
                pairs.append((parent.id, next_id))
                next_id += 1
        logger.info("Job %s produced %d adversarial examples", tag, len(job.positions))

    counts = {source.value: 0 for source in Source}
    for ex in pool + adversarial:
        counts[ex.source.value] += 1
    manifest = {
        "epsilon": epsilon,
        "seed": seed,
        "attacks": [spec.model_dump(mode="json") for spec in attacks],
        "jobs": [{"tag": job.tag(attacks[job.attack]), "count": len(job.positions)} for job in jobs],
        "substitutes": [
            {"arch": m.arch.kind.value, "seed": m.seed} for m in substitutes
        ],
        "counts": counts,
        "generated_images": counts[Source.ADVERSARIAL.value] + counts[Source.SYNTHETIC.value],
        "data_amount": len(pool) + len(adversarial),
    }
    if provenance:
        manifest["provenance"] = provenance
    dataset = AugmentedDataset(examples=tuple(pool + adversarial), pairs=tuple(pairs),
                               epsilon=epsilon, manifest=manifest)
    dataset.validate()
    return dataset


def build_drl_dataset(clean: Sequence[Example], substitutes: Sequence[Model],
                      attacks: Sequence[AttackSpec], **kwargs) -> AugmentedDataset:
    """Blocking wrapper around :func:`build_drl_dataset_async`."""
    return asyncio.run(build_drl_dataset_async(clean, substitutes, attacks, **kwargs))


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

def _manifest_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != DIGEST_KEY}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _render_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)


def save_dataset(dataset: AugmentedDataset, path: Union[str, Path]) -> Path:
    """Write ``dataset`` as manifest.json + images.bin under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = []
    entries = []
    offset = 0
    for ex in dataset.examples:
        raw = ex.image.astype("<f4").tobytes()
        entries.append({
            "id": ex.id,
            "label": ex.label,
            "source": ex.source.value,
            "parent_id": ex.parent_id,
            "attack_tag": ex.attack_tag,
            "shape": list(ex.image.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "epsilon": dataset.epsilon,
        "examples": entries,
        "pairs": [list(p) for p in dataset.pairs],
        "provenance": dataset.manifest,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest[DIGEST_KEY] = _manifest_digest(manifest)
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(_render_manifest(manifest), encoding="utf-8")
    logger.info("Saved dataset %s (%d examples, %d pairs)", path, len(dataset), dataset.num_pairs)
    return path


def load_dataset(path: Union[str, Path]) -> AugmentedDataset:
    path = Path(path)
    manifest_path, blob_path = path / MANIFEST_NAME, path / BLOB_NAME
    if not manifest_path.is_file() or not blob_path.is_file():
        raise MissingArtifactError(f"no dataset at {path}")

    try:
        text = manifest_path.read_bytes().decode("utf-8")
        manifest = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{manifest_path}: not a {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetVersionError(
            f"{manifest_path}: dataset version {manifest.get('version')}, expected {DATASET_VERSION}"
        )
    if _render_manifest(manifest) != text:
        raise DatasetFormatError(f"{manifest_path}: manifest is not in canonical form")
    if manifest.get(DIGEST_KEY) != _manifest_digest(manifest):
        raise ChecksumMismatchError(f"{manifest_path}: contents do not match the manifest checksum")

    blob = blob_path.read_bytes()
    if len(blob) != manifest.get("blob_bytes") or hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise ChecksumMismatchError(f"{blob_path}: contents do not match the manifest checksum")

    try:
        examples = []
        cursor = 0
        for entry in manifest["examples"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if entry["nbytes"] != count * 4 or entry["offset"] != cursor or cursor + count * 4 > len(blob):
                raise DatasetFormatError(f"example {entry['id']}: byte range does not follow the previous example")
            cursor += entry["nbytes"]
            image = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
            examples.append(Example(
                id=int(entry["id"]), image=image.astype(np.float32), label=int(entry["label"]),
                source=Source(entry["source"]), parent_id=entry["parent_id"], attack_tag=entry["attack_tag"],
            ))
        if cursor != len(blob):
            raise DatasetFormatError(f"{blob_path}: {len(blob) - cursor} trailing bytes not owned by any example")
        pairs = tuple((int(c), int(a)) for c, a in manifest["pairs"])
        dataset = AugmentedDataset(examples=tuple(examples), pairs=pairs,
                                   epsilon=float(manifest["epsilon"]), manifest=manifest["provenance"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{manifest_path}: malformed entry ({exc})") from exc
    dataset.validate()
    return dataset


def ingest_synthetic(
    path: Union[str, Path],
    num_classes: Optional[int] = None,
    valid_range: tuple[float, float] = (0.0, 1.0),
    id_offset: int = 0,
) -> list[Example]:
    """Load externally generated clean data and tag it as synthetic.

    Ids are renumbered from ``id_offset``. A class histogram that is not
    uniform to within one example is logged as a warning.
    """
    dataset = load_dataset(path)
    lo, hi = valid_range
    out = []
    for i, ex in enumerate(dataset.examples):
        if ex.image.size and (ex.image.min() < lo or ex.image.max() > hi):
            raise PixelRangeError(
                f"example {ex.id}: pixels span [{ex.image.min()}, {ex.image.max()}], valid range [{lo}, {hi}]"
            )
        if ex.label < 0 or (num_classes is not None and ex.label >= num_classes):
            raise LabelError(f"example {ex.id}: label {ex.label} outside [0, {num_classes})")
        out.append(Example(id=id_offset + i, image=ex.image, label=ex.label, source=Source.SYNTHETIC))

    if out:
        classes = num_classes or (max(ex.label for ex in out) + 1)
        histogram = np.bincount([ex.label for ex in out], minlength=classes)
        if histogram.max() - histogram.min() > 1:
            logger.warning("Synthetic data from %s is class-imbalanced: %s", path, histogram.tolist())
    logger.info("Ingested %d synthetic examples from %s", len(out), path)
    return out
