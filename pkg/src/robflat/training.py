"""Adversarial training with the usual regularizer zoo."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackConfig, attack_dataset, project, kl_objective, pgd_linf, pgd_tau_attack
from .geometry import BallSpec, normalize, perturb, project_to_ball
from .nn import (
    NetworkSpec,
    NonFiniteError,
    ParamVector,
    backward,
    cross_entropy,
    forward,
    log_softmax,
    loss_and_grads,
    one_hot,
)

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "epoch",
    "lr",
    "train_ce",
    "train_rce",
    "test_ce",
    "test_rce",
    "train_err",
    "train_rerr",
    "test_err",
    "test_rerr",
)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Schedule:
    kind: str = "multi_step"
    milestones: tuple[int, ...] = (60, 90, 120)
    factor: float = 0.1
    cycle_length: int = 30
    peak: float | None = None

    def __post_init__(self):
        if self.kind not in ("multi_step", "constant", "cyclic", "late"):
            raise ValueError(f"unknown schedule {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    base_lr: float = 0.05
    schedule: Schedule = Schedule()
    momentum: float = 0.9
    weight_decay: float = 0.005
    attack: AttackConfig = AttackConfig(epsilon=8 / 255, steps=7, step_size=0.007)
    variant: str = "plain_at"
    trades_lambda: float = 6.0
    awp_xi: float = 0.01
    awp_iters: int = 1
    label_smoothing: float = 0.0
    label_noise: float = 0.0
    weight_clip: float | None = None
    clip_batchnorm: bool = False
    weight_average: float | None = None
    pgd_tau: int | None = None
    early_stop_every: int = 5
    early_stop_restarts: int = 5
    eval_examples: int = 1000
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("plain_at", "trades", "awp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("base_lr", "momentum", "weight_decay", "trades_lambda", "awp_xi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("label_smoothing", "label_noise"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.weight_average is not None and not 0 <= self.weight_average < 1:
            raise ValueError("weight_average must lie in [0, 1)")
        if self.weight_clip is not None and not self.weight_clip > 0:
            raise ValueError("weight_clip must be positive")
        if self.early_stop_every < 1:
            raise ValueError("early_stop_every must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def lr_at(schedule: Schedule, base_lr: float, epoch: int, epochs: int | None = None) -> float:
    """Learning rate used during ``epoch`` (0-based).

    ``late`` uses milestones 140/145 unless others are configured; ``cyclic``
    restarts at ``peak`` every ``cycle_length`` epochs and decays linearly
    toward 0 within the cycle (so mid-cycle gives ``peak / 2``).
    """
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind in ("multi_step", "late"):
        milestones = schedule.milestones
        if schedule.kind == "late" and milestones == Schedule().milestones:
            milestones = (140, 145)
        passed = sum(1 for m in milestones if epoch >= m)
        return base_lr * schedule.factor**passed
    peak = schedule.peak if schedule.peak is not None else base_lr
    pos = (epoch % schedule.cycle_length) / schedule.cycle_length
    return peak * (1.0 - pos)


# --------------------------------------------------------------------------
# label manipulation


def smooth_labels(labels, tau: float, k: int) -> np.ndarray:
    """Targets with ``1 - tau`` on the true class and ``tau / (K - 1)`` elsewhere."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    oh = one_hot(labels, k)
    if tau == 0:
        return oh
    return oh * (1 - tau) + (1 - oh) * (tau / (k - 1))


def noise_count(tau: float, batch: int) -> int:
    # Python's round is half-to-even
    return int(round(tau * batch))


def inject_label_noise(labels, tau: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Resample ``round(tau * B)`` labels of the batch uniformly over all ``K`` classes."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    labels = np.asarray(labels).copy()
    m = noise_count(tau, len(labels))
    if m == 0:
        return labels
    idx = rng.choice(len(labels), size=m, replace=False)
    labels[idx] = rng.integers(0, k, size=m)
    return labels


def expected_noisy_targets(labels, tau: float, k: int) -> np.ndarray:
    """Expected target distribution under :func:`inject_label_noise` with exact fraction ``tau``."""
    oh = one_hot(labels, k)
    return (1 - tau) * oh + tau / k


# --------------------------------------------------------------------------
# post-step hooks


def clip_weights(params: ParamVector, w_max: float, include_batchnorm: bool = False) -> ParamVector:
    """Clip weights and biases (optionally BN affine parameters) into ``[-w_max, w_max]``."""
    if not w_max > 0:
        raise ValueError("w_max must be positive")
    roles = ("weight", "bias", "bn_gamma", "bn_beta") if include_batchnorm else ("weight", "bias")
    out = params.copy()
    for key, v in out.items():
        if key[1] in roles:
            out[key] = np.clip(v, -w_max, w_max)
    return out


def update_weight_average(avg: ParamVector, current: ParamVector, tau: float) -> ParamVector:
    """``tau * avg + (1 - tau) * current`` entrywise, running statistics included."""
    avg.check_partition(current)
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    return ParamVector({k: tau * v + (1 - tau) * current[k] for k, v in avg.items()})


# --------------------------------------------------------------------------
# variant losses


def trades_loss_and_grad(spec, params, x, y, lam, attack_cfg: AttackConfig, rng, mode="train", delta_zero=False):
    """TRADES objective ``CE(f(x), y) + lam * KL(f(x) || f(x + delta))`` and its weight gradient.

    ``delta`` maximizes the KL term by PGD, started from a small Gaussian
    offset (the KL gradient vanishes at ``delta = 0``).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if delta_zero or lam == 0:
        x_adv = x.copy()
    else:
        obj = kl_objective(spec, params, x, mode=mode)
        start = np.clip(x + 0.001 * rng.standard_normal(x.shape), 0.0, 1.0)
        x_adv = _kl_pgd(spec, params, x, start, attack_cfg, obj)
    n = len(x)
    p_logits, p_cache = forward(spec, params, x, mode=mode, return_cache=True)
    q_logits, q_cache = forward(spec, params, x_adv, mode=mode, return_cache=True)
    logp, logq = log_softmax(p_logits), log_softmax(q_logits)
    p, q = np.exp(logp), np.exp(logq)
    ce, _ = cross_entropy(p_logits, y)
    kl_per = (p * (logp - logq)).sum(axis=1)
    loss = ce + lam * float(kl_per.mean())
    d_p = (p - one_hot(y, p.shape[1])) / n + lam * p * ((logp - logq) - kl_per[:, None]) / n
    d_q = lam * (q - p) / n
    g1, _ = backward(spec, params, p_cache, d_p)
    g2, _ = backward(spec, params, q_cache, d_q)
    return loss, g1.axpy(1.0, g2)


def _kl_pgd(spec, params, x, start, cfg, obj):
    x_adv = start
    for _ in range(cfg.steps):
        _, gx, _ = obj(spec, params, x_adv)
        step = np.sign(gx) if cfg.signed_gradient else gx
        x_adv = project(x_adv + cfg.step_size * step, x, cfg.epsilon)
    return x_adv


def trades_loss(spec, params, x, y, lam, attack_cfg, rng, mode="eval", delta_zero=False) -> float:
    return trades_loss_and_grad(spec, params, x, y, lam, attack_cfg, rng, mode=mode, delta_zero=delta_zero)[0]


def awp_step(spec, params, x_adv, y, xi: float, mode: str = "train", iters: int = 1) -> ParamVector:
    """Adversarial weight perturbation: normalized gradient ascent with step ``xi``, projected into ``B_xi(w)``."""
    ball = BallSpec(xi)
    nu = params.zeros_like()
    if xi == 0:
        return nu
    for _ in range(iters):
        _, _, g, _, _ = loss_and_grads(spec, perturb(params, nu), x_adv, y, mode=mode)
        step = normalize(g, params, strict=False)
        nu = project_to_ball(nu.axpy(xi, step), params, ball)
    return nu


# --------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopState:
    every: int = 5
    best_epoch: int | None = None
    best_rerr: float = math.inf
    best_rce: float = math.inf
    history: list = field(default_factory=list)


def early_stop_update(state: EarlyStopState, epoch: int, rerr: float, rce: float) -> EarlyStopState:
    """Record a holdout evaluation; best moves only on strict robust-error improvement."""
    state.history.append((epoch, rerr, rce))
    if rerr < state.best_rerr:
        state.best_epoch = epoch
        state.best_rerr = rerr
        state.best_rce = rce
    return state


# --------------------------------------------------------------------------
# training loop


@dataclass
class Snapshot:
    epoch: int
    params: ParamVector
    averaged: ParamVector | None
    momentum: ParamVector
    rng_state: dict
    metrics: dict


@dataclass
class TrainResult:
    final: Snapshot
    best: Snapshot
    log: list[dict]
    early_stop: EarlyStopState


def _errors(spec, params, x, y, res):
    clean_wrong = np.argmax(forward(spec, params, x), axis=1) != y
    return float(clean_wrong.mean()), float((clean_wrong | res.success).mean())


def evaluate(spec, params, x, y, attack: AttackConfig, rng) -> dict:
    logits = forward(spec, params, x)
    ce, _ = cross_entropy(logits, y)
    res = attack_dataset(spec, params, x, y, attack, rng)
    err, rerr = _errors(spec, params, x, y, res)
    return {"ce": ce, "rce": res.mean_loss, "err": err, "rerr": rerr}


def _grad_step(spec, params, cfg: TrainConfig, xb, yb, rng):
    """Weight gradient for one batch under the configured variant."""
    k = spec.num_classes
    if cfg.variant == "trades":
        loss, g = trades_loss_and_grad(spec, params, xb, yb, cfg.trades_lambda, cfg.attack, rng, mode="train")
        forward(spec, params, xb, mode="train", update_stats=True)
        return loss, g
    if cfg.pgd_tau is not None:
        x_adv = pgd_tau_attack(spec, params, xb, yb, cfg.pgd_tau, cfg.attack, rng, mode="train").x_adv
    else:
        x_adv = pgd_linf(spec, params, xb, yb, cfg.attack, rng, mode="train", track_best=False).x_adv
    y_upd = inject_label_noise(yb, cfg.label_noise, k, rng) if cfg.label_noise > 0 else yb
    targets = smooth_labels(y_upd, cfg.label_smoothing, k)
    at = params
    if cfg.variant == "awp":
        nu = awp_step(spec, params, x_adv, yb, cfg.awp_xi, iters=cfg.awp_iters)
        at = perturb(params, nu)
    loss, _, g, _, _ = loss_and_grads(spec, at, x_adv, targets=targets, mode="train")
    # running statistics follow the unperturbed weights
    forward(spec, params, x_adv, mode="train", update_stats=True)
    return loss, g


def sgd_update(params: ParamVector, grads: ParamVector, momentum_buf: ParamVector, lr, momentum, weight_decay):
    """Heavy-ball SGD with coupled L2 weight decay on trainable entries."""
    out = params.copy()
    buf = momentum_buf.copy()
    for key in params.trainable_keys():
        d = grads[key] + weight_decay * params[key]
        buf[key] = momentum * buf[key] + d
        out[key] = params[key] - lr * buf[key]
    return out, buf


def train(
    spec: NetworkSpec,
    params: ParamVector,
    data,
    cfg: TrainConfig,
    on_snapshot: Callable[[Snapshot, str], None] | None = None,
    augment_fn=None,
) -> TrainResult:
    """Adversarially train ``params`` on ``data`` (a :class:`robflat.data.Dataset`).

    One metrics row per epoch (row 0 evaluates the initialization).  Every
    ``early_stop_every`` epochs the holdout robust error is measured and the
    best snapshot tracked.  ``on_snapshot(snapshot, tag)`` is called for
    ``"epoch"``, ``"best"`` and ``"final"`` snapshots.
    """
    rng = np.random.default_rng(cfg.seed)
    eval_rng_seed = cfg.seed + 7919
    params = params.copy()
    buf = params.zeros_like()
    averaged = params.copy() if cfg.weight_average is not None else None
    xtr, ytr = data.train
    xte, yte = data.test
    xho, yho = data.holdout
    n_eval = cfg.eval_examples
    if len(xtr) == 0 or len(xte) == 0:
        raise ValueError("training needs non-empty train and test splits")
    if len(xho) == 0:
        log.warning("empty holdout split: early stopping disabled, best = final")
    hold_attack = AttackConfig(**{**cfg.attack.__dict__, "restarts": cfg.early_stop_restarts})
    es = EarlyStopState(every=cfg.early_stop_every)
    history: list[dict] = []

    def model():
        return averaged if averaged is not None else params

    def snap(epoch, metrics):
        return Snapshot(
            epoch,
            params.copy(),
            averaged.copy() if averaged is not None else None,
            buf.copy(),
            rng.bit_generator.state,
            dict(metrics),
        )

    def log_epoch(epoch, lr):
        erng = np.random.default_rng([eval_rng_seed, epoch])
        m = model()
        tr = evaluate(spec, m, xtr[:n_eval], ytr[:n_eval], cfg.attack, erng)
        te = evaluate(spec, m, xte[:n_eval], yte[:n_eval], cfg.attack, erng)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_ce": tr["ce"],
            "train_rce": tr["rce"],
            "test_ce": te["ce"],
            "test_rce": te["rce"],
            "train_err": tr["err"],
            "train_rerr": tr["rerr"],
            "test_err": te["err"],
            "test_rerr": te["rerr"],
        }
        history.append(row)
        log.info("epoch %d lr %.4g train_rce %.4f test_rce %.4f", epoch, lr, tr["rce"], te["rce"])
        return row

    row = log_epoch(0, lr_at(cfg.schedule, cfg.base_lr, 0, cfg.epochs))
    best = snap(0, row)
    last_good = best
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg.schedule, cfg.base_lr, epoch - 1, cfg.epochs)
        order = rng.permutation(len(xtr))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2 and any(l.kind == "batchnorm" for l in spec.layers):
                continue
            xb, yb = xtr[idx], ytr[idx]
            if augment_fn is not None and cfg.augment:
                xb = augment_fn(xb, rng)
            try:
                loss, g = _grad_step(spec, params, cfg, xb, yb, rng)
                if not np.isfinite(loss):
                    raise NonFiniteError("non-finite training loss")
            except NonFiniteError as exc:
                log.error("training diverged at epoch %d: %s", epoch, exc)
                raise TrainingDiverged(str(exc), last_good) from exc
            params, buf = sgd_update(params, g, buf, lr, cfg.momentum, cfg.weight_decay)
            if cfg.weight_clip is not None:
                params = clip_weights(params, cfg.weight_clip, cfg.clip_batchnorm)
            if averaged is not None:
                averaged = update_weight_average(averaged, params, cfg.weight_average)
        row = log_epoch(epoch, lr)
        snapshot = snap(epoch, row)
        last_good = snapshot
        if len(xho) and (epoch % cfg.early_stop_every == 0 or epoch == cfg.epochs):
            hrng = np.random.default_rng([eval_rng_seed, epoch, 1])
            ho = evaluate(spec, model(), xho, yho, hold_attack, hrng)
            before = es.best_epoch
            early_stop_update(es, epoch, ho["rerr"], ho["rce"])
            if on_snapshot is not None:
                on_snapshot(snapshot, "epoch")
            if es.best_epoch != before:
                best = snapshot
                if on_snapshot is not None:
                    on_snapshot(snapshot, "best")
    final = last_good
    if len(xho) == 0:
        best = final
    if on_snapshot is not None:
        on_snapshot(final, "final")
    return TrainResult(final, best, history, es)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: Snapshot):
        super().__init__(message)
        self.last_good = last_good
