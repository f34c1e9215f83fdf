"""
Desk-scale image classification task.

Each class owns two features:
    robust      a smooth block template, amplitude ``robust_amplitude``
    non-robust  a per-pixel ±1 pattern, amplitude ``nonrobust_amplitude``
                (kept below the attack budget, so an l∞ attack can erase it)
Images are 0.5 + robust + non-robust + Gaussian noise, clipped to [0, 1].
"""

import logging
from typing import Optional

import numpy as np

from drlkit.models.dataset import Example, Source, examples_from_arrays
from drlkit.models.schemas import ArchKind, ArchSpec, SyntheticTaskSpec
from drlkit.utils.seeding import substream

logger = logging.getLogger(__name__)


def class_templates(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(robust, non-robust) pattern stacks, each K×C×S×S with entries in {−1, +1}."""
    blocks = -(-spec.size // spec.smoothing)
    coarse = rng.choice((-1.0, 1.0), size=(spec.num_classes, spec.channels, blocks, blocks))
    robust = np.kron(coarse, np.ones((1, 1, spec.smoothing, spec.smoothing)))[..., :spec.size, :spec.size]
    fine = rng.choice((-1.0, 1.0), size=(spec.num_classes, spec.channels, spec.size, spec.size))
    return robust, fine


def _draw(spec: SyntheticTaskSpec, robust: np.ndarray, fine: np.ndarray, count: int,
          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.permutation(np.arange(count) % spec.num_classes)
    noise = rng.normal(0.0, spec.noise, size=(count, spec.channels, spec.size, spec.size))
    images = 0.5 + spec.robust_amplitude * robust[labels] + spec.nonrobust_amplitude * fine[labels] + noise
    return np.clip(images, 0.0, 1.0).astype(np.float32), labels


def make_image_task(spec: Optional[SyntheticTaskSpec] = None, seed: int = 0) -> tuple[list[Example], list[Example]]:
    """Balanced (train, test) examples; the same seed yields the same bytes."""
    spec = spec or SyntheticTaskSpec()
    rng = substream(seed, "data")
    robust, fine = class_templates(spec, rng)
    train_x, train_y = _draw(spec, robust, fine, spec.n_train, rng)
    test_x, test_y = _draw(spec, robust, fine, spec.n_test, rng)
    logger.info("Synthetic task: %d classes, %dx%dx%d, %d train / %d test",
                spec.num_classes, spec.channels, spec.size, spec.size, spec.n_train, spec.n_test)
    train = examples_from_arrays(train_x, train_y, Source.CLEAN)
    test = examples_from_arrays(test_x, test_y, Source.CLEAN, id_offset=spec.n_train)
    return train, test


def task_arch(spec: SyntheticTaskSpec, kind: ArchKind = ArchKind.SMALL_CONV, **overrides) -> ArchSpec:
    """Architecture matching the task's input geometry."""
    return ArchSpec(kind=kind, input_shape=(spec.channels, spec.size, spec.size),
                    num_classes=spec.num_classes, **overrides)
