"""Command-line entry point.

Every command writes its outputs plus a ``<stem>.manifest.json`` into
``--out-dir``.  The manifest stores the resolved configuration, the
argument vector, the seed, package versions and a SHA-256 per output, and
``robflat replay`` re-runs a manifest and checks the outputs match.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.  Errors
are written to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, load_config, parse_config
from . import experiment as ex

log = logging.getLogger("robflat")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for flatness sampling")
    p.add_argument("--out-dir", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--config", default=None, help="experiment TOML file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _attack_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack overrides")
    g.add_argument("--eps", type=float, default=None)
    g.add_argument("--pgd-steps", type=int, default=None)
    g.add_argument("--pgd-lr", type=float, default=None)
    g.add_argument("--restarts", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="robflat", description="Flatness of the robust loss landscape.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="adversarial training run")
    _attack_flags(p)

    p = sub.add_parser("eval", parents=[common], help="clean and robust loss/error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _attack_flags(p)

    p = sub.add_parser("flatness", parents=[common], help="average- or worst-case flatness")
    p.add_argument("--checkpoint", required=True, help="checkpoint file, or a directory of checkpoints")
    p.add_argument("--mode", choices=["average", "worst"], default="average")
    p.add_argument("--loss-kind", choices=["robust", "clean"], default="robust")
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    _attack_flags(p)

    p = sub.add_parser("landscape", parents=[common], help="1-D loss profile along normalized directions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=["random", "adversarial", "hessian_top"], default="random")
    p.add_argument("--loss-kind", choices=["robust", "clean"], default="robust")
    p.add_argument("--s-max", type=float, default=None, help="profile half-length (default depends on direction)")
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--directions", type=int, default=10)
    _attack_flags(p)

    p = sub.add_parser("hessian", parents=[common], help="extreme Hessian eigenvalues")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("scale-check", parents=[common], help="re-measure under layer rescaling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--factors", default="0.5,1,2")
    _attack_flags(p)

    p = sub.add_parser("report", parents=[common], help="join metrics and flatness reports into a CSV")
    p.add_argument("runs", nargs="+", help="run directories")

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None)
    return parser


# --------------------------------------------------------------------------
# helpers


def _find_config(args) -> ExperimentConfig:
    if args.config is not None:
        return load_config(args.config)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is not None:
        start = Path(ckpt).resolve()
        for d in [start if start.is_dir() else start.parent, *start.parents]:
            if (d / "config.toml").is_file():
                return load_config(d / "config.toml")
    if args.command in ("train",):
        raise ConfigError("--config is required")
    if args.command == "report":
        return ExperimentConfig()
    raise ConfigError("--config is required (no config.toml found next to the checkpoint)")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    data = cfg.model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out_dir is not None:
        data["out_dir"] = str(args.out_dir)
    section = "attack" if args.command == "train" else "eval_attack"
    for flag, key in (("eps", "epsilon"), ("pgd_steps", "steps"), ("pgd_lr", "step_size"), ("restarts", "restarts")):
        val = getattr(args, flag, None)
        if val is not None:
            data[section][key] = val
    try:
        return ExperimentConfig.model_validate(data)
    except Exception as exc:  # pydantic ValidationError
        raise ConfigError(str(exc)) from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)
    return path


def _checkpoint_paths(arg: str) -> list[Path]:
    p = Path(arg)
    if p.is_dir():
        found = sorted(p.glob("*.ckpt"))
        if not found:
            raise CheckpointError(f"no .ckpt files in {p}")
        return found
    return [p]


def _write_manifest(out: Path, stem: str, argv: list[str], cfg: ExperimentConfig, outputs: list[Path]) -> Path:
    manifest = {
        "command": argv[0] if argv else None,
        "argv": argv,
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "config": dump_config(cfg),
        "versions": ex.versions(),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(set(outputs))},
    }
    return _write_json(out / f"{stem}.manifest.json", manifest)


def _resolve_argv(argv: list[str]) -> list[str]:
    """Make file arguments absolute so a manifest can be replayed from anywhere."""
    out = []
    path_flags = {"--checkpoint", "--config"}
    prev = None
    for a in argv:
        positional_path = prev is None and not a.startswith("-") and a not in COMMANDS and Path(a).exists()
        if prev in path_flags or positional_path:
            a = str(Path(a).resolve())
        out.append(a)
        prev = a if a.startswith("--") else None
    return out


# --------------------------------------------------------------------------
# commands


def _cmd_train(args, cfg, out):
    summary = ex.run_train(cfg, out)
    # config.toml is not listed: it records out_dir, which a replay changes.
    outputs = [out / "metrics.jsonl", out / "summary.json", out / "best.ckpt", out / "final.ckpt"]
    outputs += sorted((out / "checkpoints").glob("*.ckpt"))
    print(json.dumps({"best_epoch": summary["best_epoch"], "final_epoch": summary["final_epoch"]}))
    return "train", [p for p in outputs if p.exists()]


def _cmd_eval(args, cfg, out):
    rep = ex.run_eval(cfg, load_checkpoint(args.checkpoint))
    path = _write_json(out / "eval.json", rep)
    print(json.dumps(rep))
    return "eval", [path]


def _cmd_flatness(args, cfg, out):
    paths = _checkpoint_paths(args.checkpoint)
    stem = f"flatness_{args.mode}_{args.loss_kind}"
    outputs = []
    for cp in paths:
        ckpt = load_checkpoint(cp)
        rep = ex.run_flatness(cfg, ckpt, args.mode, args.loss_kind, xi=args.xi, samples=args.samples, threads=args.threads)
        name = f"{stem}.json" if len(paths) == 1 else f"{stem}_epoch{ckpt.epoch:04d}.json"
        outputs.append(_write_json(out / name, rep))
        print(json.dumps({k: rep[k] for k in ("epoch", "mode", "loss_kind", "xi", "value", "std", "reference_loss")}))
    return stem, outputs


def _cmd_landscape(args, cfg, out):
    from .flatness import PROFILE_LENGTH

    if args.points < 2:
        raise ConfigError("--points must be >= 2")
    half = args.s_max if args.s_max is not None else PROFILE_LENGTH[args.direction]
    grid = np.linspace(-half, half, args.points)
    rows = ex.run_landscape(cfg, load_checkpoint(args.checkpoint), args.direction, grid, args.loss_kind, args.directions)
    path = _write_text(out / f"landscape_{args.direction}.csv", ex.to_csv(rows, ["s", "loss", "direction_kind", "aggregate"]))
    return f"landscape_{args.direction}", [path]


def _cmd_hessian(args, cfg, out):
    rep = ex.run_hessian(cfg, load_checkpoint(args.checkpoint)).to_dict()
    path = _write_json(out / "hessian.json", rep)
    print(json.dumps({k: rep[k] for k in ("lambda_max", "lambda_min", "convexity_ratio", "converged")}))
    return "hessian", [path]


SCALE_COLUMNS = [
    "factor", "argmax_agree", "clean_error", "reference_rce", "avg_flatness", "worst_flatness",
    "lambda_max", "lambda_min", "convexity_ratio", "converged",
]


def _cmd_scale_check(args, cfg, out):
    try:
        factors = tuple(float(f) for f in args.factors.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --factors: {args.factors}") from exc
    if any(f <= 0 for f in factors):
        raise ConfigError("scale factors must be positive")
    rows = ex.run_scale_check(cfg, load_checkpoint(args.checkpoint), factors, threads=args.threads)
    path = _write_text(out / "scale_check.csv", ex.to_csv(rows, SCALE_COLUMNS))
    sys.stdout.write(path.read_text())
    return "scale_check", [path]


REPORT_COLUMNS = [
    "run", "epoch", "train_rce", "test_rce", "rce_gap", "test_rerr", "avg_flatness", "avg_flatness_std",
    "worst_flatness", "avg_flatness_clean", "worst_flatness_clean",
]


def _cmd_report(args, cfg, out):
    for r in args.runs:
        if not (Path(r) / "metrics.jsonl").is_file():
            raise ConfigError(f"{r} is not a run directory (no metrics.jsonl)")
    rows = ex.run_report(args.runs)
    path = _write_text(out / "report.csv", ex.to_csv(rows, REPORT_COLUMNS))
    return "report", [path]


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "flatness": _cmd_flatness,
    "landscape": _cmd_landscape,
    "hessian": _cmd_hessian,
    "scale-check": _cmd_scale_check,
    "report": _cmd_report,
}


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out + [flag, value]


def replay(manifest_path, out_dir=None) -> dict:
    """Re-run a manifest into ``out_dir`` and compare output digests."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        argv, cfg_text, expected = manifest["argv"], manifest["config"], manifest["outputs"]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"unreadable manifest {manifest_path}: {exc}") from exc
    out = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="robflat-replay-"))
    out.mkdir(parents=True, exist_ok=True)
    cfg = parse_config(cfg_text)
    cfg_path = out / "replay_config.toml"
    cfg_path.write_text(dump_config(cfg))
    new_argv = _replace_flag(_replace_flag(argv, "--out-dir", str(out)), "--config", str(cfg_path))
    new_argv = _replace_flag(new_argv, "--threads", "1")
    code = main(new_argv)
    if code != EXIT_OK:
        raise RuntimeError(f"replayed command exited with code {code}")
    mismatched = [name for name, digest in expected.items() if not (out / name).is_file() or _sha256(out / name) != digest]
    return {"out_dir": str(out), "outputs": len(expected), "mismatched": mismatched, "identical": not mismatched}


def _run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        res = replay(args.manifest, args.out_dir)
        print(json.dumps(res))
        return EXIT_OK if res["identical"] else EXIT_RUNTIME
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = _apply_overrides(_find_config(args), args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem, outputs = COMMANDS[args.command](args, cfg, out)
    _write_manifest(out, stem, _resolve_argv(argv), cfg, outputs)
    return EXIT_OK


def _error(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        return _error("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
