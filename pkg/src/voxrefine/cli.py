"""Command-line entry points: dataset generation, training, evaluation,
ablation sweeps, and the HTTP service.

One JSON config file plus flat flag overrides; the merged configuration is
written to the output directory as run_config.json so a synchronous run can
be reproduced bit for bit. Exit codes: 0 ok, 2 config error, 3 data error,
4 runtime error. Failures print a single JSON line to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .clicks import OracleConfig
from .datagen import DatasetManifest, PhantomConfig, build_dataset, load_case
from .env import ActionSet, EnvConfig
from .geodesy import GeodesicConfig
from .metrics import EvalReport, evaluate_sequence, mean_report
from .network import NetConfig, load_checkpoint
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("voxrefine")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _setup_logging() -> None:
    level = {"0": logging.ERROR, "1": logging.INFO, "2": logging.DEBUG}.get(
        os.environ.get("VERBOSITY", "1"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _parse_actions(text: str) -> tuple[float, ...]:
    try:
        mags = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --actions value {text!r}: {exc}") from None
    if not mags or any(m <= 0 for m in mags):
        raise ConfigError("--actions needs positive comma-separated magnitudes")
    return mags


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _merge(file_cfg: dict, args: argparse.Namespace, flag_names: list[str]) -> dict:
    """File values first, then any flag the user actually passed."""
    merged = dict(file_cfg)
    for name in flag_names:
        val = getattr(args, name, None)
        if val is not None:
            merged[name] = val
    return merged


def _persist_config(out_dir: Path, merged: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    # "out" is where this file already lives; persisting it would make
    # otherwise-identical runs produce different trees
    payload = {"command": command,
               **{k: v for k, v in merged.items() if k != "out"}}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _env_config(merged: dict) -> EnvConfig:
    actions = ActionSet.from_magnitudes(_parse_actions(merged.get("actions", "0.1,0.2,0.4"))) \
        if isinstance(merged.get("actions", "0.1,0.2,0.4"), str) \
        else ActionSet(tuple(merged["actions"]))
    oracle = OracleConfig(
        n_click=int(merged.get("clicks", 5)),
        noise_halfwidth=int(merged.get("click_noise", 3)),
        mode=merged.get("interaction", "good"),
    )
    geodesy = GeodesicConfig(
        backend=merged.get("geodesic_backend", "raster"),
        raster_passes=int(merged.get("raster_passes", 1)),
        intensity_weight=float(merged.get("intensity_weight", 1.0)),
    )
    return EnvConfig(
        horizon=int(merged.get("steps", 5)),
        gamma=float(merged.get("gamma", 0.95)),
        actions=actions,
        oracle=oracle,
        geodesy=geodesy,
    )


def _load_split(data_dir: str, split: str) -> list:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {data_dir}")
    manifest = DatasetManifest.load(manifest_path)
    entries = manifest.entries(split)
    if not entries:
        raise DataError(f"split {split!r} is empty in {data_dir}")
    try:
        return [load_case(root, e) for e in entries]
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to load case data: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args: argparse.Namespace) -> int:
    merged = _merge(_load_config_file(args.config), args,
                    ["seed", "out"])
    out = Path(merged.get("out", "dataset"))
    template = PhantomConfig(
        dims=tuple(merged.get("dims", (16, 16, 10))),
        contrast=float(merged.get("contrast", 0.6)),
        noise_sigma=float(merged.get("noise_sigma", 0.08)),
        body_baseline=float(merged.get("body_baseline", 0.35)),
        radius_fraction=float(merged.get("radius_fraction", 0.27)),
    )
    n_cases = int(merged.get("cases", 12))
    manifest = build_dataset(
        out, n_cases, template,
        raw_dims=tuple(merged["raw_dims"]) if "raw_dims" in merged else None,
        extension=int(merged.get("extension", 4)),
        n_train1=int(merged["train1"]) if "train1" in merged else None,
        n_train2=int(merged["train2"]) if "train2" in merged else None,
        initial_method=merged.get("initial", "bg"),
        seed=int(merged.get("seed", 0)),
    )
    _persist_config(out, merged, "gen")
    log.info("wrote %d cases to %s", len(manifest.cases), out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    merged = _merge(_load_config_file(args.config), args,
                    ["seed", "out", "workers", "mode", "actions",
                     "interaction", "steps", "clicks", "data"])
    if "data" not in merged:
        raise ConfigError("train needs --data (or a 'data' config key)")
    out = Path(merged.get("out", "run"))
    env_cfg = _env_config(merged)
    cfg = TrainConfig(
        epochs_pretrain=int(merged.get("epochs_pretrain", 40)),
        epochs_finetune=int(merged.get("epochs_finetune", 20)),
        lr=float(merged.get("lr", 1e-4)),
        gamma=env_cfg.gamma,
        entropy_bonus=float(merged.get("entropy_bonus", 0.0)),
        augment=bool(merged.get("augment", True)),
        sync_mode={"sync": "sync", "async": "async"}[merged.get("mode", "sync")]
        if merged.get("mode", "sync") in ("sync", "async")
        else _bad_mode(merged["mode"]),
        workers=int(merged.get("workers", 2)),
        seed=int(merged.get("seed", 0)),
    )
    net_cfg = NetConfig(channels=int(merged.get("channels", 16)))
    dataset = _load_split(merged["data"], merged.get("split", "train1"))
    _persist_config(out, merged, "train")
    result = train(dataset, cfg, env_cfg, net_cfg, out_dir=out)
    log.info("trained %d epochs; checkpoint and log under %s",
             cfg.total_epochs, out)
    final = result.log[-1] if result.log else None
    if final is not None:
        log.info("final epoch: mean reward %.4f, mean dice %.4f",
                 final.mean_reward, final.mean_dice)
    return EXIT_OK


def _bad_mode(mode: str):
    raise ConfigError(f"--mode must be sync or async, got {mode!r}")


def cmd_eval(args: argparse.Namespace) -> int:
    merged = _merge(_load_config_file(args.config), args,
                    ["seed", "out", "actions", "interaction", "steps",
                     "clicks", "data", "checkpoint"])
    for key in ("data", "checkpoint"):
        if key not in merged:
            raise ConfigError(f"eval needs --{key} (or a {key!r} config key)")
    out = Path(merged.get("out", "eval"))
    env_cfg = _env_config(merged)
    net, _meta = _load_net(merged["checkpoint"])
    dataset = _load_split(merged["data"], merged.get("split", "test"))
    reports = [
        evaluate_sequence(net, image, prob, truth, env_cfg,
                          seed=int(merged.get("seed", 0)))
        for image, prob, truth in dataset
    ]
    report = mean_report(reports)
    _persist_config(out, merged, "eval")
    report.save(out / "eval_report.json")
    log.info("eval over %d cases: dice %s", len(reports),
             [round(d, 4) for d in report.step_dice])
    return EXIT_OK


def _load_net(path: str):
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(p)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"failed to load checkpoint: {exc}") from None


ABLATION_ACTION_SETS: dict[str, tuple[float, ...]] = {
    "pm1.0": (1.0,),
    "pm0.4": (0.4,),
    "pm0.2": (0.2,),
    "pm0.1": (0.1,),
    "pm0.1_0.2": (0.1, 0.2),
    "pm0.1_0.2_0.4": (0.1, 0.2, 0.4),
}

ABLATION_MODES = ("good", "without", "bad")


def cmd_ablate(args: argparse.Namespace) -> int:
    merged = _merge(_load_config_file(args.config), args,
                    ["seed", "out", "steps", "clicks", "data", "checkpoint"])
    for key in ("data", "checkpoint"):
        if key not in merged:
            raise ConfigError(f"ablate needs --{key} (or a {key!r} config key)")
    out = Path(merged.get("out", "ablation"))
    net, _meta = _load_net(merged["checkpoint"])
    dataset = _load_split(merged["data"], merged.get("split", "test"))
    seed = int(merged.get("seed", 0))
    _persist_config(out, merged, "ablate")

    def run_cell(name: str, env_cfg: EnvConfig) -> None:
        reports = [evaluate_sequence(net, image, prob, truth, env_cfg, seed=seed)
                   for image, prob, truth in dataset]
        mean_report(reports).save(out / f"{name}.json")
        log.info("cell %s done", name)

    base = dict(merged)
    for name, mags in ABLATION_ACTION_SETS.items():
        cell = dict(base, actions=",".join(str(m) for m in mags),
                    interaction="good")
        run_cell(f"actions_{name}", _env_config(cell))
    for mode in ABLATION_MODES:
        cell = dict(base, interaction=mode)
        run_cell(f"interaction_{mode}", _env_config(cell))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    merged = _merge(_load_config_file(args.config), args,
                    ["seed", "out", "checkpoint", "host", "port"])
    if "checkpoint" not in merged:
        raise ConfigError("serve needs --checkpoint (or a 'checkpoint' config key)")
    _load_net(merged["checkpoint"])  # fail fast before binding the port
    try:
        import uvicorn
    except ImportError as exc:  # pragma: no cover - env dependent
        raise ConfigError(f"uvicorn is required for serve: {exc}") from None
    from .service import create_app
    app = create_app(checkpoint_path=merged["checkpoint"])
    host = merged.get("host", "127.0.0.1")
    port = int(merged.get("port", 8000))
    log.info("serving on %s:%d", host, port)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxrefine",
        description="Interactive 3D segmentation refinement engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")

    p_gen = sub.add_parser("gen", help="generate a phantom dataset")
    common(p_gen)

    p_train = sub.add_parser("train", help="train a refinement policy")
    common(p_train)
    p_train.add_argument("--data", help="dataset directory (manifest.json inside)")
    p_train.add_argument("--workers", type=int, help="async worker count")
    p_train.add_argument("--mode", choices=("sync", "async"), help="training mode")
    p_train.add_argument("--actions", help="comma-separated action magnitudes")
    p_train.add_argument("--interaction", choices=("good", "without", "bad"))
    p_train.add_argument("--steps", type=int, help="refinement steps per episode")
    p_train.add_argument("--clicks", type=int, help="oracle clicks per step")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--data")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--actions")
    p_eval.add_argument("--interaction", choices=("good", "without", "bad"))
    p_eval.add_argument("--steps", type=int)
    p_eval.add_argument("--clicks", type=int)

    p_ablate = sub.add_parser("ablate", help="action-set and interaction sweeps")
    common(p_ablate)
    p_ablate.add_argument("--data")
    p_ablate.add_argument("--checkpoint")
    p_ablate.add_argument("--steps", type=int)
    p_ablate.add_argument("--clicks", type=int)

    p_serve = sub.add_parser("serve", help="start the annotation HTTP service")
    common(p_serve)
    p_serve.add_argument("--checkpoint")
    p_serve.add_argument("--port", type=int)
    p_serve.add_argument("--host")

    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, matching the config-error code
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_RUNTIME, "runtime", f"training diverged: {exc}")
    except (ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))


if __name__ == "__main__":
    sys.exit(main())
