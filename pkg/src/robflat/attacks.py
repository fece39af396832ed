"""L-infinity PGD on inputs, robust loss and robust error estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    NetworkSpec,
    NonFiniteError,
    ParamVector,
    backward,
    forward,
    iter_batches,
    log_softmax,
    loss_and_grads,
)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    steps: int = 7
    step_size: float = 0.03
    restarts: int = 1
    signed_gradient: bool = True
    random_init: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss: np.ndarray
    success: np.ndarray
    iterations: np.ndarray = field(default=None)

    @property
    def mean_loss(self) -> float:
        return float(self.loss.mean())


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon-box around ``x``, then into ``[0, 1]``.

    ``x + epsilon`` can round one ulp past the box, so entries whose computed
    ``|x_adv - x|`` still exceeds ``epsilon`` are stepped toward ``x`` until
    the constraint holds exactly in floating point.
    """
    out = np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)
    over = np.abs(out - x) > epsilon
    while over.any():
        out[over] = np.nextafter(out[over], np.broadcast_to(x, out.shape)[over])
        over = np.abs(out - x) > epsilon
    return out


def _ce_objective(spec, params, x, y, mode):
    mean, per, _, gx, logits = loss_and_grads(
        spec, params, x, y, mode=mode, want_params=False, want_inputs=True, reduction="sum"
    )
    if not np.all(np.isfinite(per)):
        raise NonFiniteError("non-finite loss during PGD ascent")
    return per, gx, logits


def _init(x, cfg: AttackConfig, rng, random_init: bool):
    if random_init and cfg.epsilon > 0:
        return project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)
    return x.copy()


def pgd_linf(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator,
    random_init: bool | None = None,
    mode: str = "eval",
    track_best: bool = True,
    objective=None,
) -> AttackResult:
    """One PGD run maximizing per-example cross-entropy within the epsilon-box.

    With ``track_best`` (default) each example keeps its highest-loss iterate,
    starting point included, so the returned loss never falls below the loss
    at the initialization.  ``success`` marks examples misclassified at any
    evaluated iterate.  ``objective(spec, params, x_adv)`` may replace the
    cross-entropy; it must return ``(per_example_loss, grad_x, logits)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if random_init is None:
        random_init = cfg.random_init
    if objective is None:
        objective = lambda s, p, xa: _ce_objective(s, p, xa, y, mode)  # noqa: E731
    x_adv = _init(x, cfg, rng, random_init)
    best_x = x_adv.copy()
    best_loss = np.full(len(x), -np.inf)
    success = np.zeros(len(x), dtype=bool)
    for it in range(cfg.steps + 1):
        per, gx, logits = objective(spec, params, x_adv)
        success |= np.argmax(logits, axis=1) != y
        if track_best:
            better = per > best_loss
            best_loss[better] = per[better]
            best_x[better] = x_adv[better]
        else:
            best_loss, best_x = per, x_adv
        if it == cfg.steps:
            break
        step = np.sign(gx) if cfg.signed_gradient else gx
        x_adv = project(x_adv + cfg.step_size * step, x, cfg.epsilon)
    return AttackResult(best_x, best_loss, success, np.full(len(x), cfg.steps))


def best_of_restarts(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator,
    mode: str = "eval",
) -> AttackResult:
    """Per-example worst case over ``cfg.restarts`` PGD runs.

    The first restart starts at ``delta = 0``; the rest start uniformly in the
    epsilon-box when ``cfg.random_init`` is set.
    """
    best = None
    for r in range(cfg.restarts):
        res = pgd_linf(spec, params, x, y, cfg, rng, random_init=(r > 0 and cfg.random_init), mode=mode)
        if best is None:
            best = res
            continue
        better = res.loss > best.loss
        best.x_adv[better] = res.x_adv[better]
        best.loss[better] = res.loss[better]
        best.success |= res.success
    return best


def attack_dataset(spec, params, x, y, cfg, rng, batch_size: int = 256, mode: str = "eval") -> AttackResult:
    xs, losses, succ = [], [], []
    for idx in iter_batches(len(x), batch_size):
        res = best_of_restarts(spec, params, x[idx], y[idx], cfg, rng, mode=mode)
        xs.append(res.x_adv)
        losses.append(res.loss)
        succ.append(res.success)
    return AttackResult(np.concatenate(xs), np.concatenate(losses), np.concatenate(succ))


def robust_loss(spec, params, x, y, cfg: AttackConfig, rng, batch_size: int = 256) -> float:
    """Mean over examples of the best-of-restarts PGD cross-entropy."""
    return attack_dataset(spec, params, x, y, cfg, rng, batch_size).mean_loss


def robust_error(spec, params, x, y, cfg: AttackConfig, rng, batch_size: int = 256) -> float:
    """Fraction of examples misclassified clean or flipped by any restart."""
    res = attack_dataset(spec, params, x, y, cfg, rng, batch_size)
    clean_wrong = np.argmax(forward(spec, params, x), axis=1) != y
    return float(np.mean(clean_wrong | res.success))


def kl_objective(spec, params, x_clean, mode: str = "eval"):
    """Objective ``KL(f(x) || f(x_adv))`` per example, as used by TRADES."""
    p_logits = forward(spec, params, x_clean, mode=mode)
    logp = log_softmax(p_logits)
    p = np.exp(logp)

    def obj(s, prm, x_adv):
        q_logits, cache = forward(s, prm, x_adv, mode=mode, return_cache=True)
        logq = log_softmax(q_logits)
        per = (p * (logp - logq)).sum(axis=1)
        _, gx = backward(s, prm, cache, np.exp(logq) - p, want_params=False, want_inputs=True)
        return per, gx, q_logits

    return obj


def pgd_tau_attack(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    tau_stop: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    mode: str = "eval",
) -> AttackResult:
    """PGD that freezes each example ``tau_stop`` iterations after its label flips.

    With ``tau_stop = 0`` examples misclassified at the starting point keep
    ``delta = 0`` (or their random start).  Emits the stopping iterate, not
    the highest-loss one; ``iterations`` counts the updates applied.
    """
    if tau_stop < 0:
        raise ValueError("tau_stop must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    x_adv = _init(x, cfg, rng, cfg.random_init)
    flip_at = np.full(len(x), -1)
    iterations = np.zeros(len(x), dtype=int)
    active = np.ones(len(x), dtype=bool)
    for it in range(cfg.steps + 1):
        per, gx, logits = _ce_objective(spec, params, x_adv, y, mode)
        flipped = np.argmax(logits, axis=1) != y
        flip_at[(flip_at < 0) & flipped] = it
        active &= ~((flip_at >= 0) & (it >= flip_at + tau_stop))
        if it == cfg.steps or not active.any():
            break
        step = np.sign(gx) if cfg.signed_gradient else gx
        moved = project(x_adv + cfg.step_size * step, x, cfg.epsilon)
        x_adv[active] = moved[active]
        iterations[active] += 1
    per, _, logits = _ce_objective(spec, params, x_adv, y, mode)
    return AttackResult(x_adv, per, np.argmax(logits, axis=1) != y, iterations)
