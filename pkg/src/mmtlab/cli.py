"""Command-line front end: data, pretraining, training, evaluation, reports.

Every command takes a JSON config (file path or shipped preset name),
resolves it against desk-scale defaults, and writes its artifacts into
one output directory: the resolved config, checkpoints, logs, metrics,
and a manifest of content hashes. Reruns with identical inputs leave
identical bytes behind, which is what makes sweeps resumable and runs
comparable.

Failures print a one-line JSON error record to stderr and exit nonzero.
``MMTLAB_THREADS`` caps how many sweep cells train in parallel
processes; the default is one (fully sequential).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, check_data_compat, load_run_config, preset_path
from .errors import CheckpointError, ConfigError, MmtlabError, SchemaError
from .mae import MaeDecoders, load_pretrained, mae_train, save_pretrained, transfer_encoder
from .missing import MmtBank, SubstitutionMethod
from .model import MbtParameters, ModelConfig, load_checkpoint, save_checkpoint
from .protocol import MetricsTable, blob_sha1, evaluate, make_test_variants, sweep, write_manifest
from .report import render_svg, render_text
from .synthdata import generate, save_dataset
from .training import TrainConfig, train

log = logging.getLogger("mmtlab")

SWEEP_AXES = ("p", "fusion_layer", "r_train")


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve(args) -> RunConfig:
    source = args.config
    if source is None:
        raise ConfigError("--config is required (a JSON file or a preset name)")
    if not os.path.exists(source):
        source = preset_path(source)
    overrides = {"seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    return load_run_config(source, overrides)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(str(out / "config.json"))
    return out


def _write_run_manifest(out: Path, command: str) -> None:
    """Hash every artifact in the run directory; skip the volatile log."""
    skip = {"manifest.json", "run.log"}
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in skip:
            files[str(p.relative_to(out))] = blob_sha1(str(p))
    write_manifest(str(out / "manifest.json"), {"command": command, "files": files})


def _load_finetune(path: str):
    """A finetune checkpoint holds model weights plus any token bank."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, ckpt_cfg, stage = load_checkpoint(path)
    if stage != "finetune":
        raise CheckpointError(f"{path}: expected a finetune checkpoint, got {stage!r}")
    mcfg = ModelConfig.from_dict(ckpt_cfg["model"])
    mmt = {k: v for k, v in arrays.items() if k.startswith("mmt.")}
    rest = {k: v for k, v in arrays.items() if not k.startswith("mmt.")}
    params = MbtParameters.from_arrays(mcfg, rest)
    bank = MmtBank.from_arrays(mcfg.embed_dim, mmt) if mmt else None
    return params, bank, ckpt_cfg


def _train_one(cfg: RunConfig, ckpt_path: Path, pretrained: str | None) -> dict:
    """Train a classifier into ``ckpt_path``; returns the history log."""
    ds = generate(cfg.synth, cfg.seed, cfg.n_train, split="train")
    if pretrained:
        pre_params, _ = load_pretrained(pretrained)
        params, bank = transfer_encoder(pre_params, cfg.model, cfg.seed)
    else:
        params = MbtParameters.init(cfg.model, cfg.seed)
        bank = MmtBank.init(cfg.model.embed_dim, cfg.seed)
    result = train(params, bank, ds, cfg.train, cfg.seed)
    arrays = {**params.as_arrays(), **bank.as_arrays()}
    ckpt_cfg = {"model": cfg.model.to_dict(), "train": cfg.train.to_dict()}
    save_checkpoint(str(ckpt_path), arrays, ckpt_cfg, stage="finetune")
    log.info(
        "trained %d samples for %d steps, final loss %.4f",
        result.kept,
        result.steps,
        result.history[-1]["loss"],
    )
    return {"history": result.history, "steps": result.steps, "kept": result.kept}


def _eval_into_table(
    cfg: RunConfig,
    params: MbtParameters,
    bank: MmtBank | None,
    method: SubstitutionMethod,
    rates_pct: list[float],
    table: MetricsTable,
    label: str | None = None,
) -> None:
    """Evaluate one model over the rate grid, adding any absent rows."""
    label = label or method.value
    ds = generate(cfg.synth, cfg.seed, cfg.n_test, split="test")
    variants = make_test_variants(
        ds.missing[cfg.eval_missing], [r / 100.0 for r in rates_pct], cfg.seed
    )
    arch = "full_sa" if params.config.fusion_mode == "full_sa" else "bottleneck"
    names = params.config.head_names
    for r in rates_pct:
        if all(table.has(label, r, h, cfg.seed) for h in names):
            continue
        missing = dict(ds.missing)
        missing[cfg.eval_missing] = variants[r / 100.0]
        res = evaluate(params, bank, ds, missing, method, arch=arch)
        for h, name in enumerate(names):
            if not table.has(label, r, name, cfg.seed):
                table.add(label, r, name, cfg.seed, res["per_head"][h], res["n"])
        log.info("eval %s at r_test=%g%%: mean accuracy %.4f", label, r, res["mean"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    check_data_compat(cfg)
    out = _prepare_out(cfg)
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        ds = generate(cfg.synth, cfg.seed, n, split=split)
        save_dataset(str(out / f"{split}.mmtdata"), ds)
        log.info("wrote %d %s samples", n, split)
    _write_run_manifest(out, "gen-data")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    check_data_compat(cfg)
    out = _prepare_out(cfg)
    ds = generate(cfg.synth, cfg.seed, cfg.n_train, split="train")
    params = MbtParameters.init(cfg.model, cfg.seed)
    dec = MaeDecoders.init(cfg.model, cfg.mae, cfg.seed)
    result = mae_train(params, dec, ds, cfg.mae, cfg.seed)
    save_pretrained(str(out / "pretrain.ckpt"), params, dec)
    with open(out / "pretrain_log.json", "w") as f:
        json.dump(
            {"history": result.history, "steps": result.steps, "kept": result.kept},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    log.info("pretrained on %d samples, final loss %.4f", result.kept, result.history[-1]["loss"])
    _write_run_manifest(out, "pretrain")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    check_data_compat(cfg)
    out = _prepare_out(cfg)
    log_payload = _train_one(cfg, out / "model.ckpt", args.checkpoint)
    with open(out / "train_log.json", "w") as f:
        json.dump(log_payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_manifest(out, "train")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    check_data_compat(cfg)
    out = _prepare_out(cfg)
    ckpt = args.checkpoint or str(out / "model.ckpt")
    params, bank, _ = _load_finetune(ckpt)
    method = SubstitutionMethod.parse(args.method or cfg.eval_method)
    rates = _parse_rates(args.rtest) if args.rtest else list(cfg.eval_rates)
    metrics_path = out / "metrics.csv"
    table = MetricsTable.load(str(metrics_path)) if metrics_path.exists() else MetricsTable()
    _eval_into_table(cfg, params, bank, method, rates, table)
    table.save(str(metrics_path))
    _write_run_manifest(out, "eval")
    return 0


def _apply_axis(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    if axis == "p":
        targets = tuple(cfg.train.replace_probs) or (cfg.eval_missing,)
        probs = {m: value for m in targets}
        return replace(cfg, train=_patch_train(cfg.train, replace_probs=probs))
    if axis == "fusion_layer":
        if value != int(value):
            raise ConfigError(f"fusion_layer grid values must be integers, got {value}")
        model = ModelConfig.from_dict({**cfg.model.to_dict(), "fusion_layer": int(value)})
        return replace(cfg, model=model)
    if axis == "r_train":
        induced = {cfg.eval_missing: value / 100.0}
        return replace(cfg, train=_patch_train(cfg.train, induced_missing=induced))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _patch_train(tcfg: TrainConfig, **changes) -> TrainConfig:
    return TrainConfig.from_dict({**tcfg.to_dict(), **changes})


def _cell_dir(out: Path, axis: str, value: float, seed: int) -> Path:
    return out / "cells" / f"{axis}={value:g}-seed={seed}"


def _ensure_cell_model(out: str, cfg_dict: dict, axis: str, value: float, seed: int) -> str:
    """Train one sweep cell's model if its checkpoint is not there yet.

    Module-level so a process pool can run cells concurrently; each cell
    owns its subdirectory and touches nothing shared.
    """
    cfg = load_run_config(cfg_dict, {"seed": seed})
    cfg = _apply_axis(cfg, axis, value)
    cell = _cell_dir(Path(out), axis, value, seed)
    cell.mkdir(parents=True, exist_ok=True)
    ckpt = cell / "model.ckpt"
    if not ckpt.exists():
        cfg = replace(cfg, out=str(cell))
        cfg.save(str(cell / "config.json"))
        payload = _train_one(cfg, ckpt, pretrained=None)
        with open(cell / "train_log.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    return str(ckpt)


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    check_data_compat(cfg)
    out = _prepare_out(cfg)
    axis = args.axis
    grid = _parse_rates(args.grid)
    if not grid:
        raise ConfigError("--grid must list at least one value")
    method = SubstitutionMethod.parse(cfg.eval_method)
    rates = list(cfg.eval_rates)
    names = cfg.model.head_names

    pending = [
        (str(out), cfg.to_json_dict(), axis, value, seed)
        for value in grid
        for seed in cfg.seeds
        if not _cell_dir(out, axis, value, seed).joinpath("model.ckpt").exists()
    ]
    workers = _thread_cap()
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_ensure_cell_model, *zip(*pending)))
    else:
        for job in pending:
            _ensure_cell_model(*job)

    metrics_path = out / "metrics.csv"
    table = MetricsTable.load(str(metrics_path)) if metrics_path.exists() else MetricsTable()
    cells = [
        {
            "method": f"{method.value}|{axis}={value:g}",
            "r_test": r,
            "seed": seed,
            "heads": names,
            "value": value,
        }
        for value in grid
        for seed in cfg.seeds
        for r in rates
    ]

    loaded: dict[tuple, tuple] = {}

    def run_cell(cell):
        key = (cell["value"], cell["seed"])
        if key not in loaded:
            ckpt = _cell_dir(out, axis, cell["value"], cell["seed"]) / "model.ckpt"
            loaded[key] = _load_finetune(str(ckpt))[:2]
        params, bank = loaded[key]
        cell_cfg = _apply_axis(
            load_run_config(cfg.to_json_dict(), {"seed": cell["seed"]}), axis, cell["value"]
        )
        ds = generate(cell_cfg.synth, cell_cfg.seed, cell_cfg.n_test, split="test")
        variants = make_test_variants(
            ds.missing[cell_cfg.eval_missing], [cell["r_test"] / 100.0], cell_cfg.seed
        )
        missing = dict(ds.missing)
        missing[cell_cfg.eval_missing] = variants[cell["r_test"] / 100.0]
        arch = "full_sa" if params.config.fusion_mode == "full_sa" else "bottleneck"
        res = evaluate(params, bank, ds, missing, method, arch=arch)
        return {name: (res["per_head"][h], res["n"]) for h, name in enumerate(names)}

    sweep(cells, run_cell, table, str(metrics_path))
    _write_run_manifest(out, "sweep")
    return 0


def cmd_report(args) -> int:
    table = MetricsTable.load(args.metrics)
    out = Path(args.out) if args.out else Path(args.metrics).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    text = render_text(table)
    with open(out / "report.txt", "w") as f:
        f.write(text)
    with open(out / "report.svg", "w") as f:
        f.write(render_svg(table))
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _parse_rates(spec: str) -> list[float]:
    try:
        return [float(part) for part in str(spec).split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"could not parse number list {spec!r}") from None


def _thread_cap() -> int:
    raw = os.environ.get("MMTLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MMTLAB_THREADS={raw!r} is not an integer") from None


def _add_common(sub, with_checkpoint=False):
    sub.add_argument("--config", help="JSON config file or shipped preset name")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default=None, help="override the output directory")
    if with_checkpoint:
        sub.add_argument("--checkpoint", default=None, help="checkpoint file to start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtlab",
        description="multimodal bottleneck classifiers under missing modalities",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("gen-data", help="write train/test dataset files"))
    _add_common(sub.add_parser("pretrain", help="masked-autoencoder pretraining"))
    _add_common(sub.add_parser("train", help="supervised training"), with_checkpoint=True)

    ev = sub.add_parser("eval", help="accuracy over a missing-rate grid")
    _add_common(ev, with_checkpoint=True)
    ev.add_argument("--method", choices=[m.value for m in SubstitutionMethod], default=None)
    ev.add_argument("--rtest", default=None, help="comma-separated percents, e.g. 0,25,50,75,100")

    sw = sub.add_parser("sweep", help="train+eval over one axis and all seeds")
    _add_common(sw)
    sw.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sw.add_argument("--grid", required=True, help="comma-separated axis values")

    rp = sub.add_parser("report", help="text table and SVG chart from a metrics CSV")
    rp.add_argument("metrics", help="metrics.csv produced by eval or sweep")
    rp.add_argument("--out", default=None, help="directory for report files")
    return parser


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    try:
        return _DISPATCH[args.command](args)
    except (MmtlabError, OSError) as e:
        record = {"error": type(e).__name__, "message": str(e), "command": args.command}
        if isinstance(e, SchemaError):
            record["offending_keys"] = list(e.offending_keys)
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
