"""
Gradient-based l∞ attacks: FGSM, PGD, MIM, C&W-loss and ensemble PGD.

Every attack shares ``project_linf`` and computes input gradients with a
backward pass restricted to the input tensor, so substitute parameters are
read-only and disjoint batches can be attacked from several threads at once.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from drlkit.core.tensor import (
    Tensor,
    add,
    backward,
    check_labels,
    cross_entropy_per_example,
    mul,
    no_grad,
    pick,
    relu,
    softmax_ce,
    sub,
    tmax,
    tsum,
)
from drlkit.models.schemas import AttackConfig, AttackKind, Fusion
from drlkit.services.model_zoo import Model, forward_logits
from drlkit.utils.errors import ConfigError, NonFiniteError, ShapeError
from drlkit.utils.seeding import substream

logger = logging.getLogger(__name__)

# Added to the target-class logit when taking the max over the other classes.
_EXCLUDE = -1e30

Models = Union[Model, Sequence[Model]]


@dataclass
class AttackResult:
    """Adversarial batch plus per-example final loss and success flags."""
    adversarial: np.ndarray
    losses: np.ndarray
    success: np.ndarray  # prediction != label on the attacked model(s)
    kind: AttackKind

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if self.success.size else 0.0


def project_linf(candidate, origin, eps: float, valid_range: tuple[float, float]) -> np.ndarray:
    """Clamp each coordinate into [origin-eps, origin+eps], then into valid_range."""
    cand = np.asarray(candidate.data if isinstance(candidate, Tensor) else candidate, dtype=np.float64)
    orig = np.asarray(origin.data if isinstance(origin, Tensor) else origin, dtype=np.float64)
    if cand.shape != orig.shape:
        raise ShapeError(f"candidate shape {cand.shape} differs from origin shape {orig.shape}")
    lo, hi = valid_range
    return np.clip(np.clip(cand, orig - eps, orig + eps), lo, hi)


def _as_models(models: Models) -> list[Model]:
    members = [models] if isinstance(models, Model) else list(models)
    if not members:
        raise ConfigError("an attack needs at least one model")
    first = members[0].arch
    for m in members[1:]:
        if m.arch.input_shape != first.input_shape or m.arch.num_classes != first.num_classes:
            raise ShapeError("ensemble members disagree on input shape or class count")
    return members


def _prepare(members: list[Model], x, y) -> tuple[np.ndarray, np.ndarray]:
    xv = np.asarray(x, dtype=np.float64)
    expected = tuple(members[0].arch.input_shape)
    if xv.ndim != len(expected) + 1 or tuple(xv.shape[1:]) != expected:
        raise ShapeError(f"batch shape {xv.shape} does not match input shape (N, {expected})")
    labels = check_labels(y, members[0].arch.num_classes, xv.shape[0])
    return xv, labels


def _fused_logits(members: list[Model], xt: Tensor) -> Tensor:
    total = None
    for m in members:
        logits = forward_logits(m, xt)
        total = logits if total is None else add(total, logits)
    return mul(total, 1.0 / len(members))


def _ce_objective(members: list[Model], xt: Tensor, y: np.ndarray, cfg: AttackConfig) -> Tensor:
    if cfg.fusion == Fusion.LOGIT:
        return softmax_ce(_fused_logits(members, xt), y)
    total = None
    for m in members:
        loss = softmax_ce(forward_logits(m, xt), y)
        total = loss if total is None else add(total, loss)
    return mul(total, 1.0 / len(members))


def _input_gradient(objective, members, x: np.ndarray, *args) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = objective(members, xt, *args)
    backward(loss, inputs=[xt])
    grad = xt.grad
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite input gradient")
    return grad


def _ce_losses(members: list[Model], adv: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    with no_grad():
        if cfg.fusion == Fusion.LOGIT:
            return cross_entropy_per_example(_fused_logits(members, adv).data, y)
        return np.mean(
            [cross_entropy_per_example(forward_logits(m, adv).data, y) for m in members], axis=0
        )


def _success(members: list[Model], adv: np.ndarray, y: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = _fused_logits(members, adv).data
    return np.argmax(logits, axis=1) != y


def _random_start(x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if not cfg.random_start:
        return x.copy()
    rng = substream(cfg.seed, "attack")
    noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return project_linf(x + noise, x, cfg.epsilon, cfg.valid_range)


def _identity(members, x, y, cfg, kind) -> AttackResult:
    return AttackResult(
        adversarial=x.copy(),
        losses=_ce_losses(members, x, y, cfg),
        success=_success(members, x, y),
        kind=kind,
    )


def fgsm(model: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """Single step: x + eps * sign(grad CE), clamped to the valid range."""
    members = _as_models(model)
    xv, labels = _prepare(members, x, y)
    if cfg.epsilon == 0:
        return _identity(members, xv, labels, cfg, AttackKind.FGSM)
    grad = _input_gradient(_ce_objective, members, xv, labels, cfg)
    adv = project_linf(xv + cfg.epsilon * np.sign(grad), xv, cfg.epsilon, cfg.valid_range)
    return AttackResult(adv, _ce_losses(members, adv, labels, cfg), _success(members, adv, labels),
                        AttackKind.FGSM)


def ensemble_attack(models: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """PGD on the mean of the members' CE losses (or of their logits)."""
    members = _as_models(models)
    xv, labels = _prepare(members, x, y)
    kind = AttackKind.ENS if len(members) > 1 else AttackKind.PGD
    if cfg.epsilon == 0 or cfg.steps == 0:
        return _identity(members, xv, labels, cfg, kind)

    adv = _random_start(xv, cfg)
    alpha = cfg.step_size
    for step in range(cfg.steps):
        grad = _input_gradient(_ce_objective, members, adv, labels, cfg)
        adv = project_linf(adv + alpha * np.sign(grad), xv, cfg.epsilon, cfg.valid_range)
        logger.debug("%s step %d/%d", kind.value, step + 1, cfg.steps)
    return AttackResult(adv, _ce_losses(members, adv, labels, cfg), _success(members, adv, labels), kind)


def pgd(model: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """Projected sign-gradient ascent on CE, optionally from a random start."""
    result = ensemble_attack(model, x, y, cfg)
    result.kind = AttackKind.PGD
    return result


def mim(model: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """Momentum iterative attack with per-example l1-normalised gradients.

    g <- mu * g + grad / ||grad||_1 ; x <- proj(x + alpha * sign(g)).
    Examples whose gradient has zero l1 norm accumulate nothing.
    """
    members = _as_models(model)
    xv, labels = _prepare(members, x, y)
    if cfg.epsilon == 0 or cfg.steps == 0:
        return _identity(members, xv, labels, cfg, AttackKind.MIM)

    adv = _random_start(xv, cfg)
    momentum = np.zeros_like(xv)
    reduce_axes = tuple(range(1, xv.ndim))
    for _ in range(cfg.steps):
        grad = _input_gradient(_ce_objective, members, adv, labels, cfg)
        norms = np.abs(grad).sum(axis=reduce_axes, keepdims=True)
        normalized = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
        momentum = cfg.momentum_decay * momentum + normalized
        adv = project_linf(adv + cfg.step_size * np.sign(momentum), xv, cfg.epsilon, cfg.valid_range)
    return AttackResult(adv, _ce_losses(members, adv, labels, cfg), _success(members, adv, labels),
                        AttackKind.MIM)


def cw_targets(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Wrong class with the largest logit, per row."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[np.arange(masked.shape[0]), y] = -np.inf
    return np.argmax(masked, axis=1)


def _cw_terms(members: list[Model], xt: Tensor, targets: np.ndarray, kappa: float) -> Tensor:
    """Per-example ReLU(max_{i != c} f_i - f_c + kappa)."""
    logits = _fused_logits(members, xt)
    mask = np.zeros(logits.shape)
    mask[np.arange(logits.shape[0]), targets] = _EXCLUDE
    others = tmax(add(logits, mask), axis=1)
    return relu(add(sub(others, pick(logits, targets)), kappa))


def cw_loss(model: Models, x, targets: Sequence[int], kappa: float = 0.0) -> np.ndarray:
    """Per-example C&W margin loss for explicit target classes."""
    members = _as_models(model)
    with no_grad():
        return _cw_terms(members, Tensor(np.asarray(x, dtype=np.float64)),
                         np.asarray(targets, dtype=np.int64), kappa).data.copy()


def _cw_objective(members, xt, targets, kappa):
    return tsum(_cw_terms(members, xt, targets, kappa))


def cw_linf(model: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """Projected sign-gradient descent on the C&W margin loss.

    The target class is fixed at the starting point unless ``cfg.retarget``.
    """
    members = _as_models(model)
    xv, labels = _prepare(members, x, y)
    adv = _random_start(xv, cfg) if cfg.epsilon > 0 else xv.copy()
    with no_grad():
        targets = cw_targets(_fused_logits(members, adv).data, labels)

    if cfg.epsilon > 0:
        for _ in range(cfg.steps):
            if cfg.retarget:
                with no_grad():
                    targets = cw_targets(_fused_logits(members, adv).data, labels)
            grad = _input_gradient(_cw_objective, members, adv, targets, cfg.kappa)
            adv = project_linf(adv - cfg.step_size * np.sign(grad), xv, cfg.epsilon, cfg.valid_range)

    losses = cw_loss(members, adv, targets, cfg.kappa)
    return AttackResult(adv, losses, _success(members, adv, labels), AttackKind.CW)


_DISPATCH = {
    AttackKind.FGSM: fgsm,
    AttackKind.PGD: pgd,
    AttackKind.MIM: mim,
    AttackKind.CW: cw_linf,
    AttackKind.ENS: ensemble_attack,
}


def run_attack(kind: Union[AttackKind, str], models: Models, x, y, cfg: AttackConfig) -> AttackResult:
    """Run the attack named by ``kind`` against one model or an ensemble."""
    try:
        fn = _DISPATCH[AttackKind(kind)]
    except ValueError:
        raise ConfigError(f"unknown attack kind '{kind}'") from None
    return fn(models, x, y, cfg)
