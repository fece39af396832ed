"""Hessian-vector products and extreme eigenvalues by power iteration.

The Hessian is taken of the clean cross-entropy over a fixed data slice, with
respect to the weight and bias entries only (the same subspace the flatness
measures perturb).  Unlike the flatness measures, its eigenvalues change when
batch-norm-followed layers are rescaled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .nn import NetworkSpec, ParamVector, grad_params

GradFn = Callable[[ParamVector], ParamVector]


class PowerIterationBreakdown(ArithmeticError):
    pass


@dataclass
class EigenReport:
    lambda_max: float
    lambda_min: float | None = None
    convexity_ratio: float | None = None
    iterations: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    converged: bool = True
    eigenvector: ParamVector | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("eigenvector")
        return d


def clean_grad_fn(spec: NetworkSpec, x, y, mode: str = "eval") -> GradFn:
    """Gradient of the mean clean cross-entropy, restricted to weights and biases."""

    def fn(params: ParamVector) -> ParamVector:
        _, g = grad_params(spec, params, x, y, mode=mode)
        return params.with_flat_geometric(g.flat_geometric())

    return fn


def hvp_fn(grad_fn: GradFn, params: ParamVector, v: ParamVector, h_scale: float = 1e-4) -> ParamVector:
    """Central difference of gradients: ``(g(w + h v) - g(w - h v)) / 2h`` with ``h = h_scale / ||v||``."""
    vflat = v.flat_geometric()
    vn = np.linalg.norm(vflat)
    if vn == 0:
        return params.with_flat_geometric(np.zeros_like(vflat))
    h = h_scale / vn
    plus = params.copy()
    minus = params.copy()
    for key in params.geometric_keys():
        plus[key] = params[key] + h * v[key]
        minus[key] = params[key] - h * v[key]
    hv = (grad_fn(plus).flat_geometric() - grad_fn(minus).flat_geometric()) / (2 * h)
    if not np.all(np.isfinite(hv)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return params.with_flat_geometric(hv)


def hvp(spec: NetworkSpec, params: ParamVector, x, y, v: ParamVector) -> ParamVector:
    return hvp_fn(clean_grad_fn(spec, x, y), params, v)


def _power_iteration(op, n: int, tol: float, max_iters: int, rng: np.random.Generator):
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam, res = 0.0, np.inf
    for it in range(1, max_iters + 1):
        hv = op(v)
        lam = float(v @ hv)
        res = float(np.linalg.norm(hv - lam * v)) / max(abs(lam), np.finfo(float).tiny)
        if res < tol:
            return lam, v, res, it, True
        nrm = np.linalg.norm(hv)
        if nrm == 0 or not np.isfinite(nrm):
            raise PowerIterationBreakdown("power iteration hit a zero or non-finite iterate")
        v = hv / nrm
    return lam, v, res, max_iters, False


def _flat_op(grad_fn, params):
    def op(vflat):
        return hvp_fn(grad_fn, params, params.with_flat_geometric(vflat)).flat_geometric()

    return op


def dominant_eigenvalue(
    grad_fn: GradFn, params: ParamVector, tol: float = 1e-4, max_iters: int = 2000, rng=None
) -> EigenReport:
    """Power iteration on the Hessian operator.

    Returns the eigenvalue of largest magnitude with its sign, so a
    negative-definite Hessian reports its most negative eigenvalue.
    Convergence means ``||Hv - lambda v|| / |lambda| < tol`` for the unit iterate
    ``v``; the relative residual keeps the criterion meaningful when a
    rescaling shrinks the whole spectrum.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    op = _flat_op(grad_fn, params)
    lam, v, res, it, ok = _power_iteration(op, params.num_geometric(), tol, max_iters, rng)
    return EigenReport(
        lambda_max=lam,
        iterations={"max": it},
        residuals={"max": res},
        converged=ok,
        eigenvector=params.with_flat_geometric(v),
    )


def max_eigenvalue(spec, params, x, y, tol: float = 1e-4, max_iters: int = 2000, rng=None) -> EigenReport:
    return dominant_eigenvalue(clean_grad_fn(spec, x, y), params, tol, max_iters, rng)


def shifted_min_eigenvalue(
    grad_fn: GradFn, params: ParamVector, report: EigenReport, tol: float = 1e-4, max_iters: int = 2000, rng=None
) -> EigenReport:
    """Power iteration on ``H - lambda_max I``; fills ``lambda_min`` and the convexity ratio."""
    rng = rng if rng is not None else np.random.default_rng(1)
    base = _flat_op(grad_fn, params)
    shift = report.lambda_max

    def op(v):
        return base(v) - shift * v

    mu, _, res, it, ok = _power_iteration(op, params.num_geometric(), tol, max_iters, rng)
    lam_min = mu + shift
    lam_max = report.lambda_max
    if lam_min > lam_max:
        # dominant eigenvalue was the negative end of the spectrum
        lam_min, lam_max = lam_max, lam_min
    report.lambda_min = lam_min
    report.lambda_max = lam_max
    report.convexity_ratio = abs(lam_min) / abs(lam_max) if lam_max != 0 else float("inf")
    report.iterations["min"] = it
    report.residuals["min"] = res
    report.converged = report.converged and ok
    return report


def min_eigenvalue(spec, params, x, y, report: EigenReport, tol: float = 1e-4, max_iters: int = 2000, rng=None) -> EigenReport:
    return shifted_min_eigenvalue(clean_grad_fn(spec, x, y), params, report, tol, max_iters, rng)


def eigen_report(spec, params, x, y, tol: float = 1e-4, max_iters: int = 2000, seed: int = 0) -> EigenReport:
    grad_fn = clean_grad_fn(spec, x, y)
    rep = dominant_eigenvalue(grad_fn, params, tol, max_iters, np.random.default_rng([seed, 0]))
    return shifted_min_eigenvalue(grad_fn, params, rep, tol, max_iters, np.random.default_rng([seed, 1]))
