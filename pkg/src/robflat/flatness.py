"""Average- and worst-case flatness of the robust (or clean) loss in weight space.

Both measures compare the loss in a relative per-layer neighborhood
``B_xi(w)`` against the reference loss at ``w``:

* average case: mean over random ``nu`` drawn from the ball, minus reference;
* worst case: max over ``nu`` found by joint projected ascent on ``nu`` and
  the input perturbation ``delta``, minus reference.

The robust loss at every perturbed weight vector is re-estimated from scratch
with PGD.  All random streams are derived from ``(seed, purpose, sample,
batch)``, so the attack at ``w + nu`` sees exactly the same random starts as
the reference attack at ``w``; with ``xi = 0`` both measures are exactly 0.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, _init, best_of_restarts, project
from .geometry import BallSpec, normalize, perturb, project_to_ball, sample_in_ball
from .nn import NetworkSpec, ParamVector, cross_entropy, forward, iter_batches, loss_and_grads

# purpose tags for derived random streams
_ATTACK, _NU, _DELTA, _DIRECTION = 1, 2, 3, 4

# directions are rescaled to these lengths after per-layer normalization
PROFILE_LENGTH = {"random": 0.5, "adversarial": 0.025, "hessian_top": 0.5}

PRESETS = {
    "average": 0.5,
    "worst": 0.003,
    "worst_small": 0.00075,
}


class FlatnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlatnessConfig:
    ball: BallSpec = BallSpec(0.5)
    mode: str = "average"
    loss_kind: str = "robust"
    n_samples: int = 10
    joint_steps: int = 20
    nu_step_size: float = 0.001
    attack: AttackConfig = AttackConfig(epsilon=0.1, steps=20, step_size=0.01, restarts=10)
    batch_size: int = 128
    radial: str = "ball"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("average", "worst"):
            raise ValueError(f"unknown flatness mode {self.mode!r}")
        if self.loss_kind not in ("robust", "clean"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.n_samples < 1:
            raise ValueError("need at least one sample / restart")
        if self.mode == "worst" and self.joint_steps < 1:
            raise ValueError("worst-case flatness needs joint_steps >= 1")

    def echo(self) -> dict:
        d = asdict(self)
        d["xi"] = self.ball.xi
        d["granularity"] = self.ball.granularity
        del d["ball"]
        return d


@dataclass
class FlatnessReport:
    mode: str
    loss_kind: str
    xi: float
    value: float
    std: float
    reference_loss: float
    per_sample: list[float]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


# --------------------------------------------------------------------------
# loss landscapes


class NetworkLoss:
    """Per-example loss of a network on a fixed data slice.

    With ``attack`` set the loss is the PGD robust loss, otherwise the clean
    cross-entropy.  ``step`` performs one joint ascent iteration: it returns
    the weight gradient of the summed loss at ``(params, x + delta)`` and the
    updated, projected ``delta``.
    """

    def __init__(self, spec: NetworkSpec, x, y, attack: AttackConfig | None = None, batch_size: int = 128, mode: str = "eval"):
        self.spec = spec
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        self.attack = attack
        self.batch_size = batch_size
        self.mode = mode

    @property
    def n_examples(self) -> int:
        return len(self.x)

    def batches(self) -> list[np.ndarray]:
        return list(iter_batches(len(self.x), self.batch_size))

    def losses(self, params: ParamVector, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x, y = self.x[idx], self.y[idx]
        if self.attack is None:
            return cross_entropy(forward(self.spec, params, x, mode=self.mode), y)[1]
        return best_of_restarts(self.spec, params, x, y, self.attack, rng, mode=self.mode).loss

    def init_state(self, idx: np.ndarray, rng: np.random.Generator):
        if self.attack is None:
            return None
        return _init(self.x[idx], self.attack, rng, self.attack.random_init)

    def step(self, params: ParamVector, idx: np.ndarray, state):
        robust = self.attack is not None
        xs = state if robust else self.x[idx]
        _, _, gp, gx, _ = loss_and_grads(
            self.spec, params, xs, self.y[idx], mode=self.mode, want_inputs=robust, reduction="sum"
        )
        if robust:
            cfg = self.attack
            upd = np.sign(gx) if cfg.signed_gradient else gx
            state = project(state + cfg.step_size * upd, self.x[idx], cfg.epsilon)
        return gp, state


class QuadraticLoss:
    """Toy landscape ``sum_k a_k (w_k - w0_k)^2`` over the flattened weights.

    It has a single "example" and no input perturbation; useful as an oracle
    for the flatness machinery.
    """

    def __init__(self, center: ParamVector, curvature):
        self.center = center
        self.curvature = np.asarray(curvature, dtype=np.float64)
        if self.curvature.shape != center.flat_geometric().shape:
            raise ValueError("curvature must have one entry per geometric parameter")

    n_examples = 1

    def batches(self):
        return [np.arange(1)]

    def _offset(self, params):
        return params.flat_geometric() - self.center.flat_geometric()

    def losses(self, params, idx, rng):
        d = self._offset(params)
        return np.array([float(np.sum(self.curvature * d * d))])

    def init_state(self, idx, rng):
        return None

    def step(self, params, idx, state):
        d = self._offset(params)
        return self.center.with_flat_geometric(2.0 * self.curvature * d), state


# --------------------------------------------------------------------------
# measurements


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def reference_losses(landscape, params: ParamVector, seed: int) -> list[np.ndarray]:
    return [landscape.losses(params, idx, rng_for(seed, _ATTACK, b)) for b, idx in enumerate(landscape.batches())]


def _mean_of(batch_losses) -> float:
    total = sum(float(l.sum()) for l in batch_losses)
    return total / sum(len(l) for l in batch_losses)


def _sampled_nu(params, cfg: FlatnessConfig, r: int, b: int) -> ParamVector:
    return sample_in_ball(params, cfg.ball, rng_for(cfg.seed, _NU, r, b), radial=cfg.radial)


def _report(cfg: FlatnessConfig, mode: str, ref: float, per_sample: list[float]) -> FlatnessReport:
    arr = np.asarray(per_sample)
    value = float(arr.mean()) if mode == "average" else float(arr.max())
    std = float(arr.std()) if len(arr) > 1 else 0.0
    return FlatnessReport(mode, cfg.loss_kind, cfg.ball.xi, value, std, ref, [float(v) for v in arr], cfg.echo())


def average_case(landscape, params: ParamVector, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    """Mean loss increase over ``cfg.n_samples`` random ``nu`` per batch."""
    batches = landscape.batches()
    ref = _mean_of(reference_losses(landscape, params, cfg.seed))

    def one(r):
        losses = []
        for b, idx in enumerate(batches):
            nu = _sampled_nu(params, cfg, r, b)
            losses.append(landscape.losses(perturb(params, nu), idx, rng_for(cfg.seed, _ATTACK, b)))
        return _mean_of(losses) - ref

    return _report(cfg, "average", ref, _map(one, range(cfg.n_samples), threads))


def joint_ascent(landscape, params: ParamVector, nu: ParamVector, idx, cfg: FlatnessConfig, rng) -> ParamVector:
    """Projected ascent on ``nu`` (per-layer normalized steps) interleaved with PGD on ``delta``."""
    state = landscape.init_state(idx, rng)
    for _ in range(cfg.joint_steps):
        grad, state = landscape.step(perturb(params, nu), idx, state)
        update = normalize(grad, params, cfg.ball.granularity, strict=False)
        nu = project_to_ball(nu.axpy(cfg.nu_step_size, update), params, cfg.ball)
        if not nu.is_finite():
            raise FlatnessError("non-finite weight perturbation during joint ascent")
    return nu


def worst_case(landscape, params: ParamVector, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    """Max loss increase over ``cfg.n_samples`` joint-ascent restarts.

    Restart ``r`` starts from the same ``nu`` that sample ``r`` of
    :func:`average_case` draws.  Per batch, the starting and the final
    ``nu`` are both re-attacked with the reference protocol and the larger
    batch loss is kept, so each restart dominates its average-case sample.
    """
    batches = landscape.batches()
    ref = _mean_of(reference_losses(landscape, params, cfg.seed))

    def one(r):
        losses = []
        for b, idx in enumerate(batches):
            nu0 = _sampled_nu(params, cfg, r, b)
            start = landscape.losses(perturb(params, nu0), idx, rng_for(cfg.seed, _ATTACK, b))
            if cfg.ball.xi == 0:
                losses.append(start)
                continue
            nu = joint_ascent(landscape, params, nu0, idx, cfg, rng_for(cfg.seed, _DELTA, r, b))
            end = landscape.losses(perturb(params, nu), idx, rng_for(cfg.seed, _ATTACK, b))
            losses.append(end if end.sum() > start.sum() else start)
        return _mean_of(losses) - ref

    return _report(cfg, "worst", ref, _map(one, range(cfg.n_samples), threads))


def _network_landscape(spec, x, y, cfg: FlatnessConfig, loss_kind: str):
    attack = cfg.attack if loss_kind == "robust" else None
    return NetworkLoss(spec, x, y, attack=attack, batch_size=cfg.batch_size)


def average_case_flatness(spec, params, x, y, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    return average_case(_network_landscape(spec, x, y, cfg, cfg.loss_kind), params, cfg, threads)


def worst_case_flatness(spec, params, x, y, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    return worst_case(_network_landscape(spec, x, y, cfg, cfg.loss_kind), params, cfg, threads)


def clean_flatness(spec, params, x, y, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    """Either measure on the clean cross-entropy (no input perturbation)."""
    clean = replace(cfg, loss_kind="clean")
    landscape = _network_landscape(spec, x, y, clean, "clean")
    if clean.mode == "average":
        return average_case(landscape, params, clean, threads)
    return worst_case(landscape, params, clean, threads)


def measure(spec, params, x, y, cfg: FlatnessConfig, threads: int = 1) -> FlatnessReport:
    landscape = _network_landscape(spec, x, y, cfg, cfg.loss_kind)
    if cfg.mode == "average":
        return average_case(landscape, params, cfg, threads)
    return worst_case(landscape, params, cfg, threads)


# --------------------------------------------------------------------------
# 1-D profiles


def profile_directions(
    landscape,
    params: ParamVector,
    kind: str,
    cfg: FlatnessConfig,
    n_directions: int = 10,
    hessian_direction: ParamVector | None = None,
) -> list[ParamVector]:
    """Per-layer normalized directions, rescaled to the profile length of ``kind``."""
    length = PROFILE_LENGTH[kind]
    dirs = []
    if kind == "random":
        for k in range(n_directions):
            rng = rng_for(cfg.seed, _DIRECTION, k)
            g = params.zeros_like()
            for key in params.geometric_keys():
                g[key] = rng.standard_normal(params[key].shape)
            dirs.append(normalize(g, params, cfg.ball.granularity).scale(length))
    elif kind == "adversarial":
        idx = landscape.batches()[0]
        for k in range(n_directions):
            nu0 = sample_in_ball(params, cfg.ball, rng_for(cfg.seed, _NU, k, 0), radial=cfg.radial)
            nu = joint_ascent(landscape, params, nu0, idx, cfg, rng_for(cfg.seed, _DELTA, k, 0))
            dirs.append(normalize(nu, params, cfg.ball.granularity, strict=False).scale(length))
    elif kind == "hessian_top":
        if hessian_direction is None:
            raise ValueError("hessian_top profile needs the top eigenvector")
        dirs.append(normalize(hessian_direction, params, cfg.ball.granularity, strict=False).scale(length))
    else:
        raise ValueError(f"unknown direction kind {kind!r}")
    return dirs


def landscape_profile(
    landscape,
    params: ParamVector,
    kind: str,
    s_grid,
    cfg: FlatnessConfig,
    n_directions: int = 10,
    hessian_direction: ParamVector | None = None,
    directions: list[ParamVector] | None = None,
) -> list[tuple[float, float]]:
    """Loss at ``w + s * d`` for each ``s``, aggregated over directions.

    Random and Hessian directions are averaged, adversarial ones maximized.
    Adversarial examples are recomputed at every grid point.
    """
    s_grid = list(s_grid)
    if not s_grid:
        raise ValueError("s_grid must not be empty")
    if directions is None:
        directions = profile_directions(landscape, params, kind, cfg, n_directions, hessian_direction)
    batches = landscape.batches()
    rows = []
    for s in s_grid:
        vals = []
        for d in directions:
            p = perturb(params, d, s)
            vals.append(_mean_of([landscape.losses(p, idx, rng_for(cfg.seed, _ATTACK, b)) for b, idx in enumerate(batches)]))
        agg = max(vals) if kind == "adversarial" else float(np.mean(vals))
        rows.append((float(s), float(agg)))
    return rows
