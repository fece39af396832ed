"""Glue between configuration, data, checkpoints and the measurement modules."""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import attack_dataset
from .checkpoint import Checkpoint, model_params, save_checkpoint
from .config import ExperimentConfig, dump_config
from .data import Dataset, augment, concat_splits, load_idx, make_synthetic, whitening_stats
from .flatness import NetworkLoss, landscape_profile, measure
from .geometry import scale_layers
from .hessian import eigen_report
from .nn import NetworkSpec, cross_entropy, forward, init_params, mlp
from .training import METRIC_KEYS, Snapshot, train

log = logging.getLogger(__name__)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    seed = d.seed if d.seed is not None else cfg.seed
    if d.kind == "idx":
        tr = load_idx(d.train_images, d.train_labels)
        te = load_idx(d.test_images, d.test_labels)
        return concat_splits(tr, te, d.holdout)
    return make_synthetic(
        d.kind, d.n_train, d.dim, d.classes, d.margin, np.random.default_rng([seed, 11]),
        n_test=d.n_test, holdout=d.holdout, noise=d.noise,
    )


def build_network(cfg: ExperimentConfig, ds: Dataset) -> NetworkSpec:
    n = cfg.network
    spec = mlp(ds.dim, n.hidden, ds.num_classes, activation=n.activation, batchnorm=n.batchnorm)
    if n.whiten:
        st = whitening_stats(ds)
        spec = spec.with_whitening(st.mean, st.std)
    return spec


def eval_slice(cfg: ExperimentConfig, ds: Dataset, n: int | None = None):
    """The first ``n`` test examples (defaults to the flatness slice size)."""
    x, y = ds.test
    n = cfg.flatness.examples if n is None else n
    return x[:n], y[:n]


def snapshot_checkpoint(spec: NetworkSpec, snap: Snapshot) -> Checkpoint:
    return Checkpoint(
        spec=spec,
        params=snap.params,
        epoch=snap.epoch,
        averaged=snap.averaged,
        momentum=snap.momentum,
        rng_state=snap.rng_state,
        metrics=snap.metrics,
    )


# --------------------------------------------------------------------------
# commands


def run_train(cfg: ExperimentConfig, out: Path) -> dict:
    ds = build_dataset(cfg)
    spec = build_network(cfg, ds)
    params = init_params(spec, np.random.default_rng([cfg.seed, 13]))
    tcfg = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))

    def on_snapshot(snap: Snapshot, tag: str):
        ckpt = snapshot_checkpoint(spec, snap)
        if tag == "epoch":
            save_checkpoint(out / "checkpoints" / f"epoch_{snap.epoch:04d}.ckpt", ckpt)
        else:
            save_checkpoint(out / f"{tag}.ckpt", ckpt)

    aug = None
    if tcfg.augment and ds.image_shape is not None:
        aug = lambda xb, rng: augment(xb, rng, ds.image_shape)  # noqa: E731
    res = train(spec, params, ds, tcfg, on_snapshot=on_snapshot, augment_fn=aug)
    if tcfg.epochs == 0 or res.early_stop.best_epoch is None:
        save_checkpoint(out / "best.ckpt", snapshot_checkpoint(spec, res.best))
    with open(out / "metrics.jsonl", "w", newline="\n") as f:
        for row in res.log:
            f.write(json.dumps({k: row[k] for k in METRIC_KEYS}) + "\n")
    summary = {
        "final_epoch": res.final.epoch,
        "best_epoch": res.best.epoch,
        "final": res.log[-1],
        "best": res.log[res.best.epoch],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_eval(cfg: ExperimentConfig, ckpt: Checkpoint) -> dict:
    ds = build_dataset(cfg)
    x, y = eval_slice(cfg, ds)
    params = model_params(ckpt)
    ce, _ = cross_entropy(forward(ckpt.spec, params, x), y)
    res = attack_dataset(ckpt.spec, params, x, y, cfg.eval_attack.build(), np.random.default_rng([cfg.seed, 17]))
    clean_wrong = np.argmax(forward(ckpt.spec, params, x), axis=1) != y
    return {
        "epoch": ckpt.epoch,
        "examples": int(len(x)),
        "clean_loss": ce,
        "clean_error": float(clean_wrong.mean()),
        "robust_loss": res.mean_loss,
        "robust_error": float((clean_wrong | res.success).mean()),
    }


def run_flatness(cfg: ExperimentConfig, ckpt: Checkpoint, mode: str, loss_kind: str, xi=None, samples=None, threads: int = 1) -> dict:
    ds = build_dataset(cfg)
    x, y = eval_slice(cfg, ds)
    fcfg = cfg.flatness_config(mode, loss_kind, xi)
    if samples is not None:
        from dataclasses import replace

        fcfg = replace(fcfg, n_samples=samples)
    rep = measure(ckpt.spec, model_params(ckpt), x, y, fcfg, threads=threads)
    d = rep.to_dict()
    d["epoch"] = ckpt.epoch
    return d


def run_hessian(cfg: ExperimentConfig, ckpt: Checkpoint, params=None):
    ds = build_dataset(cfg)
    x, y = eval_slice(cfg, ds, cfg.flatness.hessian_examples)
    f = cfg.flatness
    params = model_params(ckpt) if params is None else params
    return eigen_report(ckpt.spec, params, x, y, tol=f.hessian_tol, max_iters=f.hessian_max_iters, seed=cfg.seed)


def run_landscape(cfg, ckpt, kind: str, s_grid, loss_kind: str = "robust", n_directions: int = 10, params=None):
    ds = build_dataset(cfg)
    x, y = eval_slice(cfg, ds, min(cfg.flatness.examples, cfg.flatness.batch_size))
    params = model_params(ckpt) if params is None else params
    fcfg = cfg.flatness_config("worst" if kind == "adversarial" else "average", loss_kind)
    attack = fcfg.attack if loss_kind == "robust" else None
    landscape = NetworkLoss(ckpt.spec, x, y, attack=attack, batch_size=fcfg.batch_size)
    hdir = None
    if kind == "hessian_top":
        hdir = run_hessian(cfg, ckpt, params).eigenvector
    rows = landscape_profile(landscape, params, kind, s_grid, fcfg, n_directions=n_directions, hessian_direction=hdir)
    aggregate = "max" if kind == "adversarial" else "mean"
    return [(s, loss, kind, aggregate) for s, loss in rows]


def run_scale_check(cfg: ExperimentConfig, ckpt: Checkpoint, factors=(0.5, 1.0, 2.0), threads: int = 1) -> list[dict]:
    ds = build_dataset(cfg)
    x, y = eval_slice(cfg, ds)
    spec = ckpt.spec
    base = model_params(ckpt)
    base_pred = np.argmax(forward(spec, base, x), axis=1)
    rows = []
    for factor in factors:
        params = base if factor == 1.0 else scale_layers(spec, base, factor)
        scaled = Checkpoint(spec=spec, params=params, epoch=ckpt.epoch)
        pred = np.argmax(forward(spec, params, x), axis=1)
        avg = measure(spec, params, x, y, cfg.flatness_config("average"), threads=threads)
        worst = measure(spec, params, x, y, cfg.flatness_config("worst"), threads=threads)
        eig = run_hessian(cfg, scaled)
        rows.append(
            {
                "factor": factor,
                "argmax_agree": float(np.mean(pred == base_pred)),
                "clean_error": float(np.mean(pred != y)),
                "reference_rce": avg.reference_loss,
                "avg_flatness": avg.value,
                "worst_flatness": worst.value,
                "lambda_max": eig.lambda_max,
                "lambda_min": eig.lambda_min,
                "convexity_ratio": eig.convexity_ratio,
                "converged": eig.converged,
            }
        )
    return rows


def run_report(run_dirs) -> list[dict]:
    """Join per-epoch metrics with any flatness reports found under each run directory."""
    rows = []
    for run in run_dirs:
        run = Path(run)
        metrics = {}
        with open(run / "metrics.jsonl") as f:
            for line in f:
                if line.strip():
                    m = json.loads(line)
                    metrics[m["epoch"]] = m
        flat: dict[int, dict] = {}
        for fp in sorted(run.rglob("flatness_*.json")):
            rep = json.loads(fp.read_text())
            if "epoch" not in rep:
                continue
            key = f"{rep['mode']}_{rep['loss_kind']}"
            entry = flat.setdefault(rep["epoch"], {})
            entry[key] = rep["value"]
            entry[key + "_std"] = rep["std"]
        for epoch in sorted(flat):
            if epoch not in metrics:
                continue
            m = metrics[epoch]
            f = flat[epoch]
            rows.append(
                {
                    "run": run.name,
                    "epoch": epoch,
                    "train_rce": m["train_rce"],
                    "test_rce": m["test_rce"],
                    "rce_gap": m["test_rce"] - m["train_rce"],
                    "test_rerr": m["test_rerr"],
                    "avg_flatness": f.get("average_robust", ""),
                    "avg_flatness_std": f.get("average_robust_std", ""),
                    "worst_flatness": f.get("worst_robust", ""),
                    "avg_flatness_clean": f.get("average_clean", ""),
                    "worst_flatness_clean": f.get("worst_clean", ""),
                }
            )
    return rows


def to_csv(rows: list, header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header] if isinstance(r, dict) else list(r))
    return buf.getvalue()


def versions() -> dict:
    import platform

    return {"robflat": __version__, "numpy": np.__version__, "python": platform.python_version()}
