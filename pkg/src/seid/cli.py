"""Command-line entry points: describe, gradcheck, synth, train, extract, eval.

Exit codes: 0 success, 1 contract/validation error, 2 internal failure.
Every file a command writes goes under ``--output`` (default: the
``SEID_OUTPUT`` environment variable, else ``./seid-out``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck as gc
from .errors import ConfigError, ContractError, SeidError
from .metrics import build_pairs, evaluate, read_features, read_pairs, score_pairs, write_features, write_pairs
from .model import (
    ArchitectureConfig,
    build_model,
    check_table1,
    config_from_mapping,
    describe,
    format_table,
    load_checkpoint,
    parse_key_values,
)
from .training import (
    LossConfig,
    LrSchedule,
    TrainConfig,
    embed,
    format_log_line,
    generate_synthetic_faces,
    init_state,
    intra_class_distance,
    load_state,
    predict,
    read_dataset,
    train,
    write_dataset,
)

OUTPUT_ENV = "SEID_OUTPUT"

PRESETS = {
    "desk": {
        "growth_rate": "8",
        "reduction": "2",
        "block_layers": "2,2,2",
        "input_size": "64",
        "num_classes": "10",
        "stop_epoch": "15",
        "base_lr": "0.001",
        "lambda": "0.01",
        "identities": "10",
        "per_identity": "30",
        "heldout_per_identity": "10",
        "noise": "0.1",
    },
}

TRAIN_KEYS = ("base_lr", "drop_epochs", "lr_factor", "stop_epoch", "lambda", "alpha", "batch_size", "decay", "eps", "flip")
DATA_KEYS = ("identities", "per_identity", "heldout_per_identity", "noise")


@dataclass
class RunConfig:
    command: str
    config_path: Optional[str] = None
    data: list = field(default_factory=list)
    checkpoint: Optional[str] = None
    output: str = "seid-out"
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    def split(self):
        """Partition overrides into architecture, training and data keys."""
        arch, tr, data = {}, {}, {}
        for key, value in self.overrides.items():
            if key in TRAIN_KEYS:
                tr[key] = value
            elif key in DATA_KEYS:
                data[key] = value
            else:
                arch[key] = value
        return arch, tr, data

    def architecture(self) -> ArchitectureConfig:
        arch, _, _ = self.split()
        base = ArchitectureConfig(seed=self.seed)
        if self.config_path:
            from_file = parse_key_values(Path(self.config_path).read_text())
            base = config_from_mapping(from_file, base)
        return config_from_mapping(arch, base)

    def training(self) -> TrainConfig:
        _, tr, _ = self.split()
        stop = int(tr.get("stop_epoch", 25))
        base_lr = float(tr.get("base_lr", 0.1))
        if "drop_epochs" in tr:
            drops = tuple(int(v) for v in str(tr["drop_epochs"]).split(",") if v.strip())
            sched = LrSchedule(base_lr, drops, float(tr.get("lr_factor", 0.1)), stop)
        elif stop == 25:
            sched = LrSchedule(base_lr, (10, 20), float(tr.get("lr_factor", 0.1)), 25)
        else:
            sched = dataclasses.replace(LrSchedule.scaled(stop, base_lr), factor=float(tr.get("lr_factor", 0.1)))
        loss = LossConfig(float(tr.get("lambda", 0.01)), float(tr.get("alpha", 0.9)))
        flip = str(tr.get("flip", "false")).lower() in ("1", "true", "yes")
        return TrainConfig(
            sched,
            loss,
            int(tr.get("batch_size", 32)),
            float(tr.get("decay", 0.999)),
            float(tr.get("eps", 1e-8)),
            flip,
            self.seed,
        )

    def data_settings(self) -> dict:
        _, _, data = self.split()
        return {
            "identities": int(data.get("identities", 10)),
            "per_identity": int(data.get("per_identity", 30)),
            "heldout_per_identity": int(data.get("heldout_per_identity", 10)),
            "noise": float(data.get("noise", 0.1)),
        }


def _known_keys() -> set:
    return {f.name for f in dataclasses.fields(ArchitectureConfig)} | {"k", "r"} | set(TRAIN_KEYS) | set(DATA_KEYS)


def _parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    known = _known_keys()
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"unknown override key {key!r}")
        out[key] = value.strip()
    return out


def _run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "preset", None):
        overrides.update(PRESETS[args.preset])
    flag_map = {
        "k": "growth_rate",
        "r": "reduction",
        "input_size": "input_size",
        "block_layers": "block_layers",
        "se_placement": "se_placement",
        "classes": "num_classes",
        "epochs": "stop_epoch",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    overrides.update(_parse_overrides(getattr(args, "set", None) or []))
    output = args.output or os.environ.get(OUTPUT_ENV) or "seid-out"
    return RunConfig(
        args.command,
        getattr(args, "config", None),
        list(getattr(args, "data", None) or []),
        getattr(args, "checkpoint", None),
        output,
        args.seed,
        overrides,
    )


def _out(rc: RunConfig) -> Path:
    path = Path(rc.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_describe(rc: RunConfig, expect: Optional[str] = None) -> int:
    cfg = rc.architecture()
    model = build_model(cfg)
    table = format_table(describe(model))
    out = _out(rc)
    (out / "describe.txt").write_text(table)
    sys.stdout.write(table)
    _say(f"feature_width={model.feature_width}")
    if expect == "table1":
        problems = check_table1(model)
        if problems:
            for p in problems:
                _say(f"MISMATCH {p}")
            return 1
        _say(f"table1: match for k={cfg.growth_rate}")
    return 0


def cmd_gradcheck(rc: RunConfig, components=None, tolerance: float = 1e-4, step: float = 1e-5) -> int:
    try:
        results = gc.run_suite(components, step=step, tolerance=tolerance)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}\t{r.component}\tmax_rel_error={r.max_rel_error:.3e}\tchecked={r.checked}\texcluded={r.excluded}")
    report = "\n".join(lines) + "\n"
    (_out(rc) / "gradcheck.txt").write_text(report)
    sys.stdout.write(report)
    return 0 if all(r.passed for r in results) else 1


def cmd_synth(rc: RunConfig) -> int:
    cfg = rc.architecture()
    d = rc.data_settings()
    out = _out(rc)
    size, ch = cfg.input_size, cfg.input_channels
    common = dict(size=size, noise=d["noise"], seed=rc.seed, channels=ch)
    n = d["identities"]
    train_ds = generate_synthetic_faces(n, d["per_identity"], **common)
    held = generate_synthetic_faces(n, d["heldout_per_identity"], sample_seed=rc.seed + 1000, **common)
    low = generate_synthetic_faces(n, d["heldout_per_identity"], degrade_images=True, sample_seed=rc.seed + 1000, **common)
    write_dataset(out / "train.ds", train_ds)
    write_dataset(out / "heldout.ds", held)
    write_dataset(out / "heldout_degraded.ds", low)
    clean = [(f"heldout/{i}", f"heldout/{j}", s) for i, j, s in build_pairs(held.labels, rc.seed)]
    write_pairs(out / "pairs_clean.txt", clean)
    # cross-quality pairs: clean image i against the degraded copy of image j
    cross = [(f"heldout/{i}", f"heldout_degraded/{j}", s) for i, j, s in build_pairs(held.labels, rc.seed + 1)]
    write_pairs(out / "pairs_cross.txt", cross)
    _say(f"wrote {len(train_ds)} training, {len(held)} held-out images and {len(clean)} pairs to {out}")
    return 0


def cmd_train(rc: RunConfig, resume: bool = False, stop_after: Optional[int] = None) -> int:
    if not rc.data:
        raise ContractError("train needs --data")
    out = _out(rc)
    ckpt = Path(rc.checkpoint) if rc.checkpoint else out / "checkpoint"
    log_path = out / "train.log"
    ds = read_dataset(rc.data[0])
    if resume and (ckpt / "manifest.txt").exists():
        state, tcfg = load_state(ckpt)
        _say(f"resuming at epoch {state.epoch}")
    else:
        cfg = rc.architecture()
        tcfg = rc.training()
        state = init_state(build_model(cfg), tcfg)
        log_path.write_text("")
    mcfg = state.model.config
    if ds.shape != (mcfg.input_channels, mcfg.input_size, mcfg.input_size) or ds.num_classes > mcfg.num_classes:
        raise ContractError(
            f"dataset {ds.shape} with {ds.num_classes} classes does not fit the architecture "
            f"({mcfg.input_channels}x{mcfg.input_size}x{mcfg.input_size}, {mcfg.num_classes} classes)"
        )
    start = time.perf_counter()
    history = train(
        state,
        ds,
        tcfg,
        log_path=log_path,
        checkpoint_dir=ckpt,
        stop_after=stop_after,
        progress=lambda m: _say(format_log_line(m)),
    )
    finished = state.epoch >= tcfg.schedule.stop_epoch
    summary = {
        "epochs_completed": state.epoch,
        "finished": finished,
        "seconds": round(time.perf_counter() - start, 3),
        "architecture": mcfg.to_text().splitlines(),
        "train": tcfg.to_dict(),
    }
    if history:
        summary["final_loss"] = history[-1].loss
        summary["final_train_accuracy"] = history[-1].accuracy
    if finished:
        feats = embed(state.model, ds.images)
        summary["eval_train_accuracy"] = float((predict(state.model, ds.images) == ds.labels).mean())
        summary["intra_class_distance"] = intra_class_distance(feats, ds.labels)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_extract(rc: RunConfig) -> int:
    if not rc.checkpoint:
        raise ContractError("extract needs --checkpoint")
    if not rc.data:
        raise ContractError("extract needs at least one --data file")
    model, _, _ = load_checkpoint(rc.checkpoint)
    ids, rows = [], []
    for path in rc.data:
        ds = read_dataset(path)
        stem = Path(path).stem
        feats = embed(model, ds.images)
        ids.extend(f"{stem}/{i}" for i in range(len(ds)))
        rows.append(feats)
    features = np.concatenate(rows)
    out = _out(rc) / "features.txt"
    write_features(out, ids, features)
    _say(f"wrote {len(ids)} features of width {features.shape[1]} to {out}")
    return 0


def cmd_eval(rc: RunConfig, features_path: str, pairs_path: str, folds: int = 10) -> int:
    feats = read_features(features_path)
    pairs = read_pairs(pairs_path)
    scores = score_pairs(feats, pairs)
    report = evaluate(scores, folds=folds, seed=rc.seed)
    text = report.to_text()
    (_out(rc) / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, arch=True):
        sp.add_argument("--output", help="output directory (default $SEID_OUTPUT or ./seid-out)")
        sp.add_argument("--seed", type=int, default=0)
        if arch:
            sp.add_argument("--config", help="architecture config file (key=value lines)")
            sp.add_argument("--preset", choices=sorted(PRESETS))
            sp.add_argument("--k", type=int, help="growth rate")
            sp.add_argument("--r", type=int, help="SE reduction ratio")
            sp.add_argument("--input-size", type=int)
            sp.add_argument("--block-layers", help="comma-separated layer counts")
            sp.add_argument("--se-placement", choices=["before", "after", "none"])
            sp.add_argument("--classes", type=int)
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("describe", help="print the shape and parameter table")
    common(sp)
    sp.add_argument("--expect", choices=["table1"])

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(sp, arch=False)
    sp.add_argument("--component", action="append", help="component or module group to run")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--step", type=float, default=1e-5)

    sp = sub.add_parser("synth", help="write synthetic datasets and pair lists")
    common(sp)

    sp = sub.add_parser("train", help="train on a dataset file")
    common(sp)
    sp.add_argument("--data", action="append", required=True)
    sp.add_argument("--checkpoint", help="checkpoint directory (default OUTPUT/checkpoint)")
    sp.add_argument("--epochs", type=int, help="stop epoch; drop epochs scale with it")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help="halt after this epoch count (for interrupted runs)")

    sp = sub.add_parser("extract", help="write penultimate features for dataset files")
    common(sp, arch=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", action="append", required=True)

    sp = sub.add_parser("eval", help="verification report from features and pairs")
    common(sp, arch=False)
    sp.add_argument("--features", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--folds", type=int, default=10)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        rc = _run_config(args)
        if args.command == "describe":
            return cmd_describe(rc, args.expect)
        if args.command == "gradcheck":
            return cmd_gradcheck(rc, args.component, args.tolerance, args.step)
        if args.command == "synth":
            return cmd_synth(rc)
        if args.command == "train":
            return cmd_train(rc, args.resume, args.stop_after)
        if args.command == "extract":
            return cmd_extract(rc)
        if args.command == "eval":
            return cmd_eval(rc, args.features, args.pairs, args.folds)
    except (SeidError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
