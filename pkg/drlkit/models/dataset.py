"""
In-memory dataset records: single examples and the one-shot augmented dataset.
"""

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from drlkit.utils.errors import DatasetFormatError, SelectionError

# Slack on the l∞ ball check for adversarial examples
BALL_TOLERANCE = 1e-9


class Source(str, Enum):
    CLEAN = "clean"
    SYNTHETIC = "synthetic"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True, eq=False)
class Example:
    id: int
    image: np.ndarray
    label: int
    source: Source = Source.CLEAN
    parent_id: Optional[int] = None
    attack_tag: Optional[str] = None

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float32)
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "label", int(self.label))
        if self.source == Source.ADVERSARIAL:
            if self.parent_id is None:
                raise DatasetFormatError(f"adversarial example {self.id} has no parent")
        elif self.parent_id is not None or self.attack_tag is not None:
            raise DatasetFormatError(f"{self.source.value} example {self.id} cannot carry a parent or attack tag")


def stack_images(examples: Iterable[Example]) -> np.ndarray:
    images = [ex.image for ex in examples]
    return np.stack(images) if images else np.zeros((0,), dtype=np.float32)


def stack_labels(examples: Iterable[Example]) -> np.ndarray:
    return np.array([ex.label for ex in examples], dtype=np.int64)


def examples_from_arrays(images: np.ndarray, labels: Sequence[int], source: Source = Source.CLEAN,
                         id_offset: int = 0) -> list[Example]:
    """Wrap an image stack and its labels as examples with consecutive ids."""
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    return [Example(id=id_offset + i, image=img, label=int(lbl), source=source)
            for i, (img, lbl) in enumerate(zip(images, labels))]


@dataclass(frozen=True, eq=False)
class AugmentedDataset:
    """Clean/synthetic examples, their adversarial copies and the (clean, adv) pairs.

    Pair ids are positions in ``pairs``. A pair whose two ids coincide is a
    self pair: it lets plain clean data flow through the same training loop.
    """
    examples: tuple[Example, ...]
    pairs: tuple[tuple[int, int], ...]
    epsilon: float = 0.0
    manifest: dict[str, Any] = field(default_factory=dict)
    _index: dict[int, Example] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "pairs", tuple((int(c), int(a)) for c, a in self.pairs))
        index = {}
        for ex in self.examples:
            if ex.id in index:
                raise DatasetFormatError(f"duplicate example id {ex.id}")
            index[ex.id] = ex
        object.__setattr__(self, "_index", index)

    @classmethod
    def self_paired(cls, examples: Sequence[Example], manifest: Optional[dict] = None) -> "AugmentedDataset":
        """Every example paired with itself (plain data, no adversarial copies)."""
        examples = tuple(examples)
        return cls(examples=examples, pairs=tuple((ex.id, ex.id) for ex in examples),
                   epsilon=0.0, manifest=dict(manifest or {}))

    def __len__(self) -> int:
        return len(self.examples)

    def get(self, example_id: int) -> Example:
        try:
            return self._index[example_id]
        except KeyError:
            raise DatasetFormatError(f"unknown example id {example_id}") from None

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    def counts(self) -> dict[str, int]:
        counts = {source.value: 0 for source in Source}
        for ex in self.examples:
            counts[ex.source.value] += 1
        return counts

    def by_source(self, *sources: Source) -> list[Example]:
        return [ex for ex in self.examples if ex.source in sources]

    def validate(self) -> None:
        """Check pair integrity and the l∞ ball around every adversarial parent."""
        for ex in self.examples:
            if ex.source == Source.ADVERSARIAL:
                parent = self.get(ex.parent_id)
                if parent.label != ex.label:
                    raise DatasetFormatError(f"example {ex.id} label differs from parent {parent.id}")
                gap = float(np.max(np.abs(ex.image.astype(np.float64) - parent.image.astype(np.float64))))
                if gap > self.epsilon + BALL_TOLERANCE:
                    raise DatasetFormatError(
                        f"example {ex.id} is {gap:.3g} from its parent, budget {self.epsilon:.3g}"
                    )
        for pair_id, (clean_id, adv_id) in enumerate(self.pairs):
            clean, adv = self.get(clean_id), self.get(adv_id)
            if clean.label != adv.label:
                raise DatasetFormatError(f"pair {pair_id} mixes labels {clean.label} and {adv.label}")
            if clean_id != adv_id and adv.parent_id != clean_id:
                raise DatasetFormatError(f"pair {pair_id}: {adv_id} is not derived from {clean_id}")

    def pair_batch(self, pair_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (clean images, adversarial images, labels) for the given pairs."""
        try:
            chosen = [self.pairs[i] for i in pair_ids]
        except IndexError:
            raise SelectionError(f"pair id out of range (dataset has {self.num_pairs} pairs)") from None
        clean = np.stack([self._index[c].image for c, _ in chosen])
        adv = np.stack([self._index[a].image for _, a in chosen])
        labels = np.array([self._index[c].label for c, _ in chosen], dtype=np.int64)
        return clean, adv, labels

    def content_hash(self) -> str:
        """sha256 over every example and pair; provenance is not hashed."""
        digest = hashlib.sha256()
        digest.update(repr(float(self.epsilon)).encode())
        for ex in self.examples:
            header = f"{ex.id}|{ex.label}|{ex.source.value}|{ex.parent_id}|{ex.attack_tag}|{ex.image.shape}"
            digest.update(header.encode())
            digest.update(ex.image.astype("<f4").tobytes())
        for clean_id, adv_id in self.pairs:
            digest.update(f"{clean_id}:{adv_id};".encode())
        return digest.hexdigest()

    @property
    def data_amount(self) -> int:
        return int(self.manifest.get("data_amount", len(self.examples)))
