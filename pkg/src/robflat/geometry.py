"""Weight-space direction arithmetic.

Every operation here works per "layer", where weights and biases of a dense
layer count as separate layers and batch-norm entries are left untouched
(directions carry zeros there).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import GEOMETRIC_ROLES, NetworkSpec, ParamVector, ShapeError

log = logging.getLogger(__name__)

GRANULARITIES = ("per_layer", "per_filter")


class DegenerateDirectionError(ValueError):
    """A direction layer has zero norm where the reference layer does not."""


@dataclass(frozen=True)
class BallSpec:
    """Relative per-layer L2 ball ``||nu_l|| <= xi * ||w_l||``."""

    xi: float
    granularity: str = "per_layer"

    def __post_init__(self):
        if not self.xi >= 0:
            raise ValueError(f"xi must be non-negative, got {self.xi}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")


def zero_direction(ref: ParamVector) -> ParamVector:
    return ref.zeros_like()


def _groups(arr: np.ndarray, granularity: str) -> np.ndarray:
    """View ``arr`` as rows that are normalized independently."""
    if granularity == "per_filter" and arr.ndim >= 2:
        return arr.reshape(arr.shape[0], -1)
    return arr.reshape(1, -1)


def normalize(
    direction: ParamVector,
    ref: ParamVector,
    granularity: str = "per_layer",
    strict: bool = True,
) -> ParamVector:
    """Rescale each layer (or filter row) of ``direction`` to the norm of ``ref``.

    ``strict=False`` leaves zero-norm direction layers at zero instead of
    raising; gradient-based updates rely on that for layers that receive no
    gradient.
    """
    direction.check_partition(ref)
    out = ref.zeros_like()
    for key in ref.geometric_keys():
        d = _groups(direction[key], granularity)
        w = _groups(ref[key], granularity)
        dn = np.linalg.norm(d, axis=1, keepdims=True)
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        res = np.zeros_like(d)
        zero_ref = (wn == 0).ravel()
        if zero_ref.any():
            # expected for freshly initialized biases under gradient-based updates
            (log.warning if strict else log.debug)("reference layer %s has zero-norm groups; direction left at zero there", key)
        zero_dir = (dn == 0).ravel() & ~zero_ref
        if zero_dir.any() and strict:
            raise DegenerateDirectionError(f"direction layer {key} has zero norm")
        ok = ~(zero_ref | zero_dir)
        res[ok] = d[ok] / dn[ok] * wn[ok]
        out[key] = res.reshape(ref[key].shape)
    return out


def _sample_group(size: int, radius: float, rng: np.random.Generator, radial: str) -> np.ndarray:
    g = rng.standard_normal(size)
    gn = np.linalg.norm(g)
    u = rng.uniform()
    if radial == "ball":
        r = radius * u ** (1.0 / size)
    elif radial == "sphere":
        r = radius
    else:
        raise ValueError(f"unknown radial law {radial!r}")
    return g / gn * r


def sample_in_ball(
    ref: ParamVector,
    ball: BallSpec,
    rng: np.random.Generator,
    radial: str = "ball",
) -> ParamVector:
    """Draw a direction uniformly from ``B_xi(ref)``, independently per layer.

    Per layer: a Gaussian vector pushed onto the unit sphere, scaled to radius
    ``xi * ||w_l|| * U**(1/n)``.  ``radial="sphere"`` drops the ``U`` factor.
    The draw consumes the same random numbers whatever ``xi`` and the norms
    of ``ref`` are, so seed-matched samples for rescaled weights are rescaled
    samples.
    """
    out = ref.zeros_like()
    for key in ref.geometric_keys():
        rows = _groups(ref[key], ball.granularity)
        res = np.empty_like(rows)
        for j, row in enumerate(rows):
            radius = ball.xi * np.linalg.norm(row)
            res[j] = _sample_group(row.size, radius, rng, radial)
        out[key] = res.reshape(ref[key].shape)
    return out


def project_to_ball(direction: ParamVector, ref: ParamVector, ball: BallSpec) -> ParamVector:
    """Radial per-layer projection onto ``B_xi(ref)``; bn entries are zeroed."""
    direction.check_partition(ref)
    out = ref.zeros_like()
    for key in ref.geometric_keys():
        d = _groups(direction[key], ball.granularity)
        bound = ball.xi * np.linalg.norm(_groups(ref[key], ball.granularity), axis=1, keepdims=True)
        dn = np.linalg.norm(d, axis=1, keepdims=True)
        factor = np.ones_like(dn)
        over = dn > bound
        factor[over] = bound[over] / dn[over]
        out[key] = (d * factor).reshape(ref[key].shape)
    return out


def in_ball(direction: ParamVector, ref: ParamVector, ball: BallSpec, rtol: float = 1e-12) -> bool:
    for key in ref.geometric_keys():
        d = np.linalg.norm(_groups(direction[key], ball.granularity), axis=1)
        bound = ball.xi * np.linalg.norm(_groups(ref[key], ball.granularity), axis=1)
        if np.any(d > bound * (1 + rtol)):
            return False
    return True


def perturb(ref: ParamVector, direction: ParamVector, s: float = 1.0) -> ParamVector:
    """``ref + s * direction`` on weights and biases; batch-norm entries copied."""
    direction.check_partition(ref)
    out = ref.copy()
    if s == 0:
        return out
    for key in ref.geometric_keys():
        out[key] = ref[key] + s * direction[key]
    return out


def scale_layers(
    spec: NetworkSpec,
    ref: ParamVector,
    factor: float,
    layer_ids=None,
) -> ParamVector:
    """Multiply weights and biases of batch-norm-followed dense layers by ``factor``.

    The following batch norm's running mean is multiplied by ``factor`` and
    its running variance and epsilon by ``factor**2``, so the network computes
    the same function in both train and eval mode.  ``layer_ids=None`` scales
    every eligible layer.
    """
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    eligible = spec.bn_followed()
    if layer_ids is None:
        layer_ids = eligible
    if not layer_ids:
        raise ShapeError("network has no dense layer followed by batch norm")
    out = ref.copy()
    for lid in layer_ids:
        if lid not in eligible:
            raise ShapeError(f"layer {lid} is not a dense layer followed by batch norm")
        for role in GEOMETRIC_ROLES:
            if (lid, role) in out.entries:
                out[(lid, role)] = ref[(lid, role)] * factor
        bn = lid + 1
        out[(bn, "bn_running_mean")] = ref[(bn, "bn_running_mean")] * factor
        out[(bn, "bn_running_var")] = ref[(bn, "bn_running_var")] * factor**2
        out[(bn, "bn_eps")] = ref[(bn, "bn_eps")] * factor**2
    return out
