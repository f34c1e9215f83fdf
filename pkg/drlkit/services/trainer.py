"""
Training on a frozen augmented dataset.

Objectives:
    ce-only   CE on the DRL examples
    drl-ar    CE + λ·AR(F(x), F(x_adv))
    da        CE on T(x′)
    augmix    CE(x′) + λ·AR(F(x), F(T(x′)))
    augmax    ½[CE(T*(x′)) + CE(x′)] + λ·AR(F(x′), F(T*(x′))), T* the worst of K

The loop never regenerates data: the dataset hash is taken before the first
epoch and checked after the last one.
"""

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from drlkit.core.tensor import (
    Tensor,
    absolute,
    add,
    backward,
    clamp,
    concat,
    log,
    mean,
    mul,
    no_grad,
    softmax,
    softmax_ce,
    sub,
    take_slice,
    tsum,
)
from drlkit.models.dataset import AugmentedDataset
from drlkit.models.schemas import (
    ArKind,
    KLDirection,
    ObjectiveKind,
    SelectionStrategy,
    TrainConfig,
    TransformSpec,
)
from drlkit.services.model_zoo import Model, forward_logits
from drlkit.services.selector import (
    SelectionState,
    SelectionTrace,
    select_epoch,
    select_random,
    update_scores,
)
from drlkit.services.transforms import corrupt_transform, sample_candidates
from drlkit.utils.errors import (
    DivergenceError,
    NonFiniteError,
    OneShotViolationError,
    SelectionError,
    ShapeError,
)
from drlkit.utils.seeding import derive_seed, substream

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


# ----------------------------------------------------------------------
# Loss terms
# ----------------------------------------------------------------------

def ar_loss(out_a, out_b, kind: Union[ArKind, str], from_logits: bool = False) -> Tensor:
    """Batch-mean alignment penalty between two N×C output distributions.

    l1: Σ|a−b|   l2sq: Σ(a−b)²   kl: Σ a·log(a/b), both sides floored at 1e-12.
    """
    a = out_a if isinstance(out_a, Tensor) else Tensor(out_a)
    b = out_b if isinstance(out_b, Tensor) else Tensor(out_b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ar_loss needs matching N×C outputs, got {a.shape} and {b.shape}")
    if from_logits:
        a, b = softmax(a, axis=1), softmax(b, axis=1)

    kind = ArKind(kind)
    if kind == ArKind.L1:
        per_row = tsum(absolute(sub(a, b)), axis=1)
    elif kind == ArKind.L2SQ:
        diff = sub(a, b)
        per_row = tsum(mul(diff, diff), axis=1)
    else:
        log_ratio = sub(log(clamp(a, KL_FLOOR)), log(clamp(b, KL_FLOOR)))
        per_row = tsum(mul(a, log_ratio), axis=1)
    return mean(per_row)


@dataclass
class ObjectiveOutput:
    """Scalar loss plus the values the loop reports.

    ``probs_clean``/``probs_adv`` are filled when the objective's own forward
    pass covers both members of each pair.
    """
    loss: Tensor
    ce: float
    ar: float
    probs_clean: Optional[np.ndarray] = None
    probs_adv: Optional[np.ndarray] = None


def _check_pair(a: np.ndarray, b: np.ndarray, labels) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"batches are not pair-aligned: {a.shape} vs {b.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != a.shape[0]:
        raise ShapeError(f"{a.shape[0]} examples but {y.shape[0]} labels")
    return y


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    return take_slice(t, slice(start, stop))


def _with_ar(ce: Tensor, lam: float, a: Tensor, b: Tensor, ar_kind) -> tuple[Tensor, float]:
    if lam == 0:
        return ce, 0.0
    reg = ar_loss(a, b, ar_kind)
    return add(ce, mul(reg, lam)), reg.item()


def drl_objective(
    model: Model,
    clean: np.ndarray,
    adv: np.ndarray,
    labels: Sequence[int],
    lam: float,
    ar_kind: Union[ArKind, str] = ArKind.L1,
    include_adv_ce: bool = False,
    kl_direction: KLDirection = KLDirection.CLEAN_TO_ADV,
) -> ObjectiveOutput:
    """CE + λ·AR(F(x), F(x_adv)) from one forward over the stacked pair batch.

    CE covers the clean half, or both halves when ``include_adv_ce``.
    """
    clean, adv = np.asarray(clean), np.asarray(adv)
    y = _check_pair(clean, adv, labels)
    n = clean.shape[0]
    logits = forward_logits(model, concat([Tensor(clean), Tensor(adv)], axis=0))
    if include_adv_ce:
        ce = softmax_ce(logits, np.concatenate([y, y]))
    else:
        ce = softmax_ce(_rows(logits, 0, n), y)

    probs = softmax(logits, axis=1)
    p_clean, p_adv = _rows(probs, 0, n), _rows(probs, n, 2 * n)
    first, second = (p_clean, p_adv) if kl_direction == KLDirection.CLEAN_TO_ADV else (p_adv, p_clean)
    loss, ar_value = _with_ar(ce, lam, first, second, ar_kind)
    return ObjectiveOutput(loss=loss, ce=ce.item(), ar=ar_value,
                           probs_clean=p_clean.data.copy(), probs_adv=p_adv.data.copy())


def ce_objective(model: Model, x: np.ndarray, labels: Sequence[int]) -> ObjectiveOutput:
    ce = softmax_ce(forward_logits(model, x), labels)
    return ObjectiveOutput(loss=ce, ce=ce.item(), ar=0.0)


def _transformed(x: np.ndarray, transform: Optional[TransformSpec], precomputed: Optional[np.ndarray]) -> np.ndarray:
    if precomputed is not None:
        return np.asarray(precomputed)
    if transform is None:
        return x
    return corrupt_transform(x, transform)


def da_objective(
    model: Model,
    x_drl: np.ndarray,
    labels: Sequence[int],
    transform: Optional[TransformSpec] = None,
    transformed: Optional[np.ndarray] = None,
) -> ObjectiveOutput:
    """CE on T(x′)."""
    x_t = _transformed(np.asarray(x_drl), transform, transformed)
    return ce_objective(model, x_t, labels)


def augmix_objective(
    model: Model,
    clean: np.ndarray,
    x_drl: np.ndarray,
    labels: Sequence[int],
    transform: Optional[TransformSpec],
    lam: float,
    ar_kind: Union[ArKind, str] = ArKind.L1,
    transformed: Optional[np.ndarray] = None,
    kl_direction: KLDirection = KLDirection.CLEAN_TO_ADV,
) -> ObjectiveOutput:
    """CE(F(x′), y) + λ·AR(F(x), F(T(x′)))."""
    clean, x_drl = np.asarray(clean), np.asarray(x_drl)
    y = _check_pair(clean, x_drl, labels)
    n = clean.shape[0]
    x_t = _transformed(x_drl, transform, transformed)
    if lam == 0:
        ce = softmax_ce(forward_logits(model, x_drl), y)
        return ObjectiveOutput(loss=ce, ce=ce.item(), ar=0.0)

    logits = forward_logits(model, concat([Tensor(x_drl), Tensor(clean), Tensor(x_t)], axis=0))
    ce = softmax_ce(_rows(logits, 0, n), y)
    probs = softmax(_rows(logits, n, 3 * n), axis=1)
    p_clean, p_t = _rows(probs, 0, n), _rows(probs, n, 2 * n)
    first, second = (p_clean, p_t) if kl_direction == KLDirection.CLEAN_TO_ADV else (p_t, p_clean)
    loss, ar_value = _with_ar(ce, lam, first, second, ar_kind)
    return ObjectiveOutput(loss=loss, ce=ce.item(), ar=ar_value)


def worst_candidate(model: Model, candidates: Sequence[np.ndarray], labels: Sequence[int]) -> int:
    """Index of the candidate batch with the highest CE; ties go to the first."""
    best, best_loss = 0, -np.inf
    with no_grad():
        for k, x_k in enumerate(candidates):
            value = softmax_ce(forward_logits(model, x_k), labels).item()
            if value > best_loss:
                best, best_loss = k, value
    return best


def augmax_objective(
    model: Model,
    x_drl: np.ndarray,
    labels: Sequence[int],
    candidates: Sequence[TransformSpec],
    lam: float,
    ar_kind: Union[ArKind, str] = ArKind.L1,
    transformed_candidates: Optional[Sequence[np.ndarray]] = None,
    kl_direction: KLDirection = KLDirection.CLEAN_TO_ADV,
) -> ObjectiveOutput:
    """½[CE(F(T*(x′))) + CE(F(x′))] + λ·AR(F(x′), F(T*(x′))).

    T* is the candidate transform with the highest CE on this batch.
    """
    x_drl = np.asarray(x_drl)
    if transformed_candidates is None:
        if not candidates:
            raise ValueError("augmax needs at least one candidate transform")
        transformed_candidates = [corrupt_transform(x_drl, spec) for spec in candidates]
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = x_drl.shape[0]
    x_star = np.asarray(transformed_candidates[worst_candidate(model, transformed_candidates, y)])
    _check_pair(x_drl, x_star, y)

    logits = forward_logits(model, concat([Tensor(x_drl), Tensor(x_star)], axis=0))
    ce_plain = softmax_ce(_rows(logits, 0, n), y)
    ce_star = softmax_ce(_rows(logits, n, 2 * n), y)
    ce = mul(add(ce_star, ce_plain), 0.5)
    if lam == 0:
        return ObjectiveOutput(loss=ce, ce=ce.item(), ar=0.0)
    probs = softmax(logits, axis=1)
    p_plain, p_star = _rows(probs, 0, n), _rows(probs, n, 2 * n)
    first, second = (p_plain, p_star) if kl_direction == KLDirection.CLEAN_TO_ADV else (p_star, p_plain)
    loss, ar_value = _with_ar(ce, lam, first, second, ar_kind)
    return ObjectiveOutput(loss=loss, ce=ce.item(), ar=ar_value)


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Optional[np.ndarray]],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> dict[str, Tensor]:
    """v <- m·v + (g + wd·p);  p <- p − lr·v.

    ``velocity`` persists across calls; missing gradients count as zero.
    Parameters receive new arrays so earlier snapshots stay valid.
    """
    for name, param in params.items():
        g = grads.get(name)
        p = param.data.astype(np.float64)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        v = velocity.get(name)
        v = momentum * (np.zeros_like(p) if v is None else v) + (g + weight_decay * p)
        velocity[name] = v
        param.data = (p - lr * v).astype(param.dtype)
    return params


class SGDMomentum:
    """SGD with momentum and coupled weight decay over a model's parameters."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        grads = {name: p.grad for name, p in params.items()}
        sgd_step(params, grads, self.velocity, self.lr, self.momentum, self.weight_decay)


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

class EpochRecord(BaseModel):
    epoch: int
    loss: float
    ce: float
    ar: float
    train_accuracy: float = Field(..., ge=0.0, le=100.0)
    selected: int
    mean_score: float


class TrainLog(BaseModel):
    objective: ObjectiveKind
    lam: float
    epochs: list[EpochRecord] = Field(default_factory=list)
    generated_data: int = 0
    data_amount: int = 0
    dataset_hash: str = ""
    trace_path: Optional[str] = None

    def accuracy_series(self) -> list[tuple[int, float]]:
        return [(rec.epoch, rec.train_accuracy) for rec in self.epochs]


@dataclass
class _Batch:
    ids: np.ndarray
    clean: np.ndarray
    adv: np.ndarray
    labels: np.ndarray
    transformed: Optional[np.ndarray] = None
    candidates: Optional[list[np.ndarray]] = None


_DONE = object()


def _drl_inputs(batch: _Batch, double: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x′, clean partner, labels): both pair members when ``double``, else the adversarial one."""
    if double:
        return (np.concatenate([batch.clean, batch.adv]),
                np.concatenate([batch.clean, batch.clean]),
                np.concatenate([batch.labels, batch.labels]))
    return batch.adv, batch.clean, batch.labels


class _BatchProducer:
    """Assembles batches (and their transforms) ahead of the training step."""

    def __init__(self, dataset: AugmentedDataset, cfg: TrainConfig, epoch: int,
                 order: np.ndarray, double: bool):
        self.dataset = dataset
        self.cfg = cfg
        self.epoch = epoch
        self.order = order
        self.double = double

    def _build(self, index: int, ids: np.ndarray) -> _Batch:
        clean, adv, labels = self.dataset.pair_batch(ids)
        batch = _Batch(ids=ids, clean=clean, adv=adv, labels=labels)
        objective = self.cfg.objective
        if objective in (ObjectiveKind.DA, ObjectiveKind.AUGMIX, ObjectiveKind.AUGMAX):
            x_drl, _, _ = _drl_inputs(batch, self.double)
            seed = derive_seed(self.cfg.seed, f"transform/epoch{self.epoch}/batch{index}")
            base = TransformSpec(kind=self.cfg.transform_kind, severity=self.cfg.transform_severity, seed=seed)
            if objective == ObjectiveKind.AUGMAX:
                specs = sample_candidates(base, self.cfg.augmax_candidates, seed)
                batch.candidates = [corrupt_transform(x_drl, spec) for spec in specs]
            else:
                batch.transformed = corrupt_transform(x_drl, base)
        return batch

    def batches(self):
        size = self.cfg.batch_size
        for index, start in enumerate(range(0, len(self.order), size)):
            yield self._build(index, self.order[start:start + size])

    def iterate(self):
        """Yield batches, prefetching up to ``cfg.prefetch`` on a worker thread."""
        if self.cfg.prefetch == 0:
            yield from self.batches()
            return

        slots: queue.Queue = queue.Queue(maxsize=self.cfg.prefetch)
        failure: list[BaseException] = []
        stop = threading.Event()

        def _produce():
            try:
                for batch in self.batches():
                    while not stop.is_set():
                        try:
                            slots.put(batch, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
            except BaseException as exc:  # re-raised on the training thread
                failure.append(exc)
            finally:
                slots.put(_DONE)

        worker = threading.Thread(target=_produce, name=f"prefetch-epoch{self.epoch}", daemon=True)
        worker.start()
        try:
            while True:
                item = slots.get()
                if item is _DONE:
                    break
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    slots.get(timeout=0.1)
                except queue.Empty:
                    pass
            worker.join()
        if failure:
            raise failure[0]


def _step_objective(model: Model, batch: _Batch, cfg: TrainConfig, lam: float, double: bool) -> ObjectiveOutput:
    objective = cfg.objective
    if objective == ObjectiveKind.DRL_AR:
        return drl_objective(model, batch.clean, batch.adv, batch.labels, lam, cfg.ar_kind,
                             include_adv_ce=double, kl_direction=cfg.kl_direction)
    x_drl, partner, labels = _drl_inputs(batch, double)
    if objective == ObjectiveKind.CE_ONLY:
        return ce_objective(model, x_drl, labels)
    if objective == ObjectiveKind.DA:
        return da_objective(model, x_drl, labels, transformed=batch.transformed)
    if objective == ObjectiveKind.AUGMIX:
        return augmix_objective(model, partner, x_drl, labels, None, lam, cfg.ar_kind,
                                transformed=batch.transformed, kl_direction=cfg.kl_direction)
    return augmax_objective(model, x_drl, labels, (), lam, cfg.ar_kind,
                            transformed_candidates=batch.candidates, kl_direction=cfg.kl_direction)


def _pair_probs(model: Model, batch: _Batch, out: ObjectiveOutput) -> tuple[np.ndarray, np.ndarray]:
    if out.probs_clean is not None and out.probs_adv is not None:
        return out.probs_clean, out.probs_adv
    with no_grad():
        n = batch.clean.shape[0]
        probs = softmax(forward_logits(model, np.concatenate([batch.clean, batch.adv])), axis=1).data
    return probs[:n], probs[n:]


def train(
    model: Model,
    dataset: AugmentedDataset,
    cfg: TrainConfig,
    trace: Optional[SelectionTrace] = None,
    on_epoch: Optional[Callable[[EpochRecord, Model], None]] = None,
) -> tuple[Model, TrainLog]:
    """Train a copy of ``model`` on the frozen ``dataset``."""
    model = model.clone()
    lam = cfg.effective_lambda
    num_pairs = dataset.num_pairs
    m = cfg.select_size or num_pairs
    if m > num_pairs:
        raise SelectionError(f"selection size {m} exceeds the {num_pairs} pairs in the dataset")

    start_hash = dataset.content_hash()
    generated = int(dataset.manifest.get("generated_images", 0))
    log = TrainLog(objective=cfg.objective, lam=lam, generated_data=generated,
                   data_amount=dataset.data_amount, dataset_hash=start_hash,
                   trace_path=str(trace.path) if trace is not None and trace.path else None)
    if cfg.epochs == 0:
        return model, log
    if num_pairs == 0:
        raise SelectionError("cannot train on a dataset without pairs")

    # self-paired data has nothing adversarial to add to the CE term
    self_paired = all(c == a for c, a in dataset.pairs)
    double = cfg.ce_on_adversarial and not self_paired
    state = SelectionState.initial(num_pairs)
    optimizer = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle_rng = substream(cfg.seed, "shuffle")
    step = 0

    for epoch in range(cfg.epochs):
        if cfg.selection == SelectionStrategy.RANDOM:
            selected = select_random(state, m, shuffle_rng)
        else:
            selected = select_epoch(state, m)
        if trace is not None:
            trace.record(epoch, selected, state)
        order = shuffle_rng.permutation(np.sort(selected))

        totals = {"loss": 0.0, "ce": 0.0, "ar": 0.0}
        correct, seen = 0, 0
        producer = _BatchProducer(dataset, cfg, epoch, order, double)
        for batch in producer.iterate():
            model.zero_grad()
            try:
                out = _step_objective(model, batch, cfg, lam, double)
                backward(out.loss)
                probs_clean, probs_adv = _pair_probs(model, batch, out)
                optimizer.step(model.params)
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            update_scores(state, batch.ids, probs_clean, probs_adv, batch.labels, stamp=step)

            n = len(batch.ids)
            totals["loss"] += out.loss.item() * n
            totals["ce"] += out.ce * n
            totals["ar"] += out.ar * n
            correct += int(np.sum(np.argmax(probs_clean, axis=1) == batch.labels))
            correct += int(np.sum(np.argmax(probs_adv, axis=1) == batch.labels))
            seen += 2 * n
            step += 1

        record = EpochRecord(
            epoch=epoch + 1,
            loss=totals["loss"] / m,
            ce=totals["ce"] / m,
            ar=totals["ar"] / m,
            train_accuracy=100.0 * correct / seen,
            selected=int(m),
            mean_score=float(state.scores[selected].mean()),
        )
        log.epochs.append(record)
        logger.info(
            "epoch %d/%d loss=%.4f ce=%.4f ar=%.5f acc=%.2f",
            record.epoch, cfg.epochs, record.loss, record.ce, record.ar, record.train_accuracy,
            extra={"metrics": record.model_dump()},
        )
        if on_epoch is not None:
            on_epoch(record, model)

    if dataset.content_hash() != start_hash:
        raise OneShotViolationError("the augmented dataset changed during training")
    if int(dataset.manifest.get("generated_images", 0)) != generated:
        raise OneShotViolationError("the generated-data counter changed during training")
    return model, log


def pretrain(model: Model, dataset: AugmentedDataset, cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Plain CE training on every pair, as used for normally trained checkpoints."""
    plain = cfg.model_copy(update={"objective": ObjectiveKind.CE_ONLY, "select_size": None})
    return train(model, dataset, plain)


class LambdaTrial(BaseModel):
    lam: float
    final_loss: float
    score: float


def lambda_grid_search(
    model: Model,
    dataset: AugmentedDataset,
    cfg: TrainConfig,
    grid: Sequence[float] = LAMBDA_GRID,
    score_fn: Optional[Callable[[Model], float]] = None,
) -> list[LambdaTrial]:
    """Train one model per λ and score it (default: final train accuracy)."""
    trials = []
    for lam in grid:
        trained, log = train(model, dataset, cfg.model_copy(update={"lam": lam}))
        final = log.epochs[-1] if log.epochs else None
        score = score_fn(trained) if score_fn is not None else (final.train_accuracy if final else 0.0)
        trials.append(LambdaTrial(lam=lam, final_loss=final.loss if final else 0.0, score=score))
        logger.info("lambda=%g score=%.3f", lam, score)
    return trials


def best_lambda(trials: Sequence[LambdaTrial]) -> float:
    """λ with the highest score; ties go to the smaller λ."""
    return min(trials, key=lambda t: (-t.score, t.lam)).lam
