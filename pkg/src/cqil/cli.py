"""Command-line entry point: ``cqil <command> [flags]``.

Commands: gen-data, train-sr, train, eval, degrade, report. Every command
writes a ``run.json`` manifest next to its outputs and exits non-zero with a
JSON error record on stderr when anything goes wrong. Config files are flat
YAML mappings; explicit flags override them.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import yaml

from . import __version__
from .corpus import (PROTOCOLS, CorpusSpec, ProtocolError, build_protocol_splits, generate_corpus, read_corpus_meta,
                     read_manifest, read_splits, write_splits)
from .degrade import DegradeParams, gaussian_degrade_suite
from .metrics import (REPORT_FIELDS, MetricsReport, aggregate_protocol2, evaluate, reports_json, write_reports)
from .sres import SRNetwork, train_sr
from .train import (VARIANTS, TrainConfig, evaluate_split, fit, load_checkpoint, load_sr_checkpoint, load_tensors,
                    save_sr_checkpoint)

log = logging.getLogger("cqil")

DATA_ROOT_ENV = "CQIL_DATA_ROOT"
MANIFEST_NAME = "run.json"
P2_IDS = ("P2.1", "P2.2", "P2.3", "P2.4")


class CLIError(Exception):
    """Bad input detected by the CLI itself."""


# ------------------------------------------------------------------ run manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list
    config_digest: str
    seed: int | None
    inputs: dict
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = ""
    tool_version: str = __version__

    def record(self, path, base: Path):
        path = Path(path)
        self.outputs[str(path.relative_to(base))] = file_digest(path)

    def write(self, directory) -> Path:
        self.finished = _now()
        p = Path(directory) / MANIFEST_NAME
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def verify_manifest(directory) -> list[str]:
    """Outputs whose current digest differs from the one recorded (empty when all verify)."""
    directory = Path(directory)
    doc = json.loads((directory / MANIFEST_NAME).read_text())
    bad = []
    for rel, digest in doc["outputs"].items():
        p = directory / rel
        if not p.exists() or file_digest(p) != digest:
            bad.append(rel)
    return bad


def _dict_digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


# ------------------------------------------------------------------ helpers

def data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ROOT_ENV) or "data"
    return Path(root)


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise CLIError(f"config file {p} must hold a mapping of field: value")
    return doc


def merged(file_cfg: dict, **flags) -> dict:
    """Config-file values overridden by every flag that was given."""
    out = dict(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def protocol_splits(root: Path, protocol_id: str):
    split_dir = root / "splits" / protocol_id
    if split_dir.exists():
        splits = read_splits(split_dir, protocol_id)
        splits.validate()
        return splits
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}; run gen-data first")
    return build_protocol_splits(read_manifest(manifest), protocol_id)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = merged(load_config_file(args.config), rng_seed=args.seed, n_subjects=args.n_subjects,
                 images_per_subject_per_category=args.images_per_category, live_multiplier=args.live_multiplier,
                 image_size=None if args.image_size is None else [args.image_size] * 2)
    spec = CorpusSpec.from_dict(cfg)
    out = Path(args.out) if args.out else data_root(args)
    manifest = RunManifest("gen-data", sys.argv[1:], _dict_digest(spec.to_dict()), spec.rng_seed, {})
    records = generate_corpus(spec, out)
    manifest.record(out / "manifest.csv", out)
    manifest.record(out / "corpus.json", out)
    for pid in (args.protocol or PROTOCOLS):
        splits = build_protocol_splits(records, pid, seed=args.split_seed)
        for p in write_splits(splits, out / "splits" / pid).values():
            manifest.record(p, out)
    manifest.write(out)
    print(json.dumps({"out": str(out), "records": len(records)}))
    return 0


def cmd_train_sr(args) -> int:
    cfg = merged({"epochs": 5, "lr": 1e-3, "batch_size": 8, "seed": 0, "kernel": 3, "scale": 2, "noise": 0.01,
                  "holdout": 0.1}, **load_config_file(args.config))
    cfg = merged(cfg, epochs=args.epochs, seed=args.seed, kernel=args.kernel, scale=args.scale)
    root = data_root(args)
    records = [r for r in read_manifest(root / "manifest.csv") if r.tier == 0]
    if not records:
        raise CLIError(f"{root}: no clean (tier 0) images to train on")
    clean, _ = load_tensors(records, root)
    params = DegradeParams(int(cfg["scale"]), int(cfg["kernel"]), cfg.get("sigma"), float(cfg["noise"]))
    out = Path(args.out)
    ckpt = out if out.suffix == ".ckpt" else out / "sr.ckpt"
    run_dir = ckpt.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train-sr", sys.argv[1:], _dict_digest(cfg), int(cfg["seed"]), {"data": str(root)})
    torch.manual_seed(int(cfg["seed"]))
    net = SRNetwork(image_size=clean.shape[-1])
    history: list = []
    train_sr(net, clean, params, int(cfg["epochs"]), lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
             seed=int(cfg["seed"]), holdout=float(cfg["holdout"]), history=history)
    save_sr_checkpoint(net, ckpt, {"config_digest": manifest.config_digest, "seed": int(cfg["seed"]),
                                   "epoch": int(cfg["epochs"]), "degrade": params.to_dict(), "history": history})
    manifest.record(ckpt, run_dir)
    manifest.write(run_dir)
    print(json.dumps({"checkpoint": str(ckpt), "history": history}))
    return 0


def cmd_train(args) -> int:
    file_cfg = load_config_file(args.config)
    protocol = args.protocol or file_cfg.pop("protocol", None)
    sr_path = args.sr or file_cfg.pop("sr_checkpoint", None)
    file_cfg.pop("protocol", None)
    file_cfg.pop("sr_checkpoint", None)
    if protocol is None:
        raise CLIError("--protocol is required (flag or config file)")
    cfg = TrainConfig.from_dict(merged(file_cfg, model_variant=args.variant, seed=args.seed, epochs=args.epochs))
    root = data_root(args)
    splits = protocol_splits(root, protocol)
    meta = read_corpus_meta(root)
    size = meta.get("spec", {}).get("image_size", [cfg.image_size])[0]
    if size != cfg.image_size:
        raise CLIError(f"corpus images are {size}px but config image_size is {cfg.image_size}")
    sr_net = None
    if cfg.uses_iqv:
        if sr_path is None:
            log.warning("no --sr checkpoint given; %s starts from an untrained (identity) SR net", cfg.model_variant)
        else:
            sr_net, _ = load_sr_checkpoint(sr_path)
    out = Path(args.out)
    inputs = {"data": str(root), "protocol": protocol, "sr": None if sr_path is None else str(sr_path)}
    manifest = RunManifest("train", sys.argv[1:], cfg.digest(), cfg.seed, inputs)
    state, history = fit(cfg, splits, root, sr_net=sr_net, run_dir=out)
    (out / "protocol.txt").write_text(protocol + "\n")
    for name in ("config.json", "epochs.csv", "best.ckpt", "last.ckpt", "protocol.txt"):
        manifest.record(out / name, out)
    manifest.write(out)
    print(json.dumps({"run": str(out), "best_epoch": state.best_epoch,
                      "dev_acer": [h["dev_acer"] for h in history]}))
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "best.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    protocol = args.protocol
    if protocol is None and (run / "protocol.txt").exists():
        protocol = (run / "protocol.txt").read_text().strip()
    if protocol is None:
        raise CLIError("--protocol is required when the run directory does not record one")
    state = load_checkpoint(ckpt)
    root = data_root(args)
    splits = protocol_splits(root, protocol)
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", sys.argv[1:], state.config.digest(), state.config.seed,
                           {"checkpoint": str(ckpt), "data": str(root), "protocol": protocol})
    dev = evaluate_split(*load_tensors(splits.dev, root), state)
    label = args.label or state.config.model_variant
    reports = []
    kernels = args.kernel or []
    if not kernels or args.include_clean:
        test = evaluate_split(*load_tensors(splits.test, root), state)
        reports.append(evaluate(dev, test, protocol, label))
    if kernels:
        suite = gaussian_degrade_suite(splits.test, kernels, root, out / "degraded")
        for k in kernels:
            sub = out / "degraded" / f"gauss{k}x{k}"
            test = evaluate_split(*load_tensors(suite[k], sub), state)
            reports.append(evaluate(dev, test, protocol, f"{label}@gauss{k}x{k}"))
    csv_path, json_path = write_reports(reports, out)
    manifest.record(csv_path, out)
    manifest.record(json_path, out)
    manifest.write(out)
    print(csv_path.read_text(), end="")
    return 0


def cmd_degrade(args) -> int:
    if not args.kernel:
        raise CLIError("at least one --kernel is required")
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"manifest {src} not found")
    root = data_root(args)
    records = read_manifest(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("degrade", sys.argv[1:], _dict_digest({"kernel": args.kernel, "scale": args.scale}),
                           None, {"manifest": str(src), "data": str(root)})
    suite = gaussian_degrade_suite(records, args.kernel, root, out, scale=args.scale)
    for k, recs in suite.items():
        sub = out / (f"gauss{k}x{k}" + (f"_s{args.scale}" if args.scale > 1 else ""))
        manifest.record(sub / "manifest.csv", out)
        for r in recs:
            manifest.record(sub / r.image_path, out)
    manifest.write(out)
    print(json.dumps({k: len(v) for k, v in suite.items()}))
    return 0


def _load_reports(path: Path) -> list[MetricsReport]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    return [MetricsReport(**row) for row in doc["raw"]]


def cmd_report(args) -> int:
    files = []
    for p in map(Path, args.input):
        if p.is_dir():
            found = sorted(p.rglob("metrics.json"))
            if not found:
                raise FileNotFoundError(f"no metrics.json under {p}")
            files += found
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"{p} not found")
    reports = [r for f in files for r in _load_reports(f)]
    order = {pid: i for i, pid in enumerate(PROTOCOLS)}
    reports.sort(key=lambda r: (r.label, order.get(r.protocol_id, len(order)), r.protocol_id))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("report", sys.argv[1:], _dict_digest([str(f) for f in files]), None,
                           {"metrics": [str(f) for f in files]})
    rows = [r.percent_row() for r in reports]
    summaries = {}
    for label in sorted({r.label for r in reports}):
        p2 = [r for r in reports if r.label == label and r.protocol_id in P2_IDS]
        if sorted(r.protocol_id for r in p2) == list(P2_IDS):
            summ = aggregate_protocol2(p2)
            summaries[label] = summ
            row = {"protocol": "P2", "label": f"{label} mean±std", "threshold": ""}
            for k in ("apcer", "bpcer", "acer", "hter", "auc"):
                row[k] = f"{100 * summ.mean[k]:.2f}±{100 * summ.std[k]:.2f}"
            rows.append(row)
    lines = [",".join(REPORT_FIELDS)] + [",".join(str(row[k]) for k in REPORT_FIELDS) for row in rows]
    csv_path = out / "report.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    doc = reports_json(reports)
    doc["protocol2"] = {label: {"mean": {k: round(100 * v, 2) for k, v in s.mean.items()},
                                "std": {k: round(100 * v, 2) for k, v in s.std.items()}}
                        for label, s in summaries.items()}
    json_path = out / "report.json"
    json_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    manifest.record(csv_path, out)
    manifest.record(json_path, out)
    manifest.write(out)
    print(csv_path.read_text(), end="")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--data", help=f"corpus root (default ${DATA_ROOT_ENV} or ./data)")
        if config:
            p.add_argument("--config", help="YAML file of field: value overrides")
        return p

    p = common(sub.add_parser("gen-data", help="render the synthetic corpus and protocol splits"))
    p.add_argument("--out", help="output directory (default: the data root)")
    p.add_argument("--seed", type=int, help="corpus rng seed")
    p.add_argument("--protocol", action="append", choices=PROTOCOLS, help="split only these protocols")
    p.add_argument("--split-seed", type=int, default=0, help="shuffle seed for P1/P2 splits (0 = sorted order)")
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--images-per-category", type=int)
    p.add_argument("--live-multiplier", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-sr", help="pretrain the restoration network on clean images"))
    p.add_argument("--out", required=True, help="checkpoint path (*.ckpt) or directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--kernel", type=int, help="gaussian kernel of the training degradation")
    p.add_argument("--scale", type=int, help="down-up factor of the training degradation")
    p.set_defaults(func=cmd_train_sr)

    p = common(sub.add_parser("train", help="train one variant on one protocol"))
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--sr", help="restoration checkpoint from train-sr")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score dev and test, write metrics"), config=False)
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--checkpoint", help="checkpoint to use (default RUN/best.ckpt)")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--kernel", type=int, action="append", help="also evaluate on a KxK gaussian-blurred test set")
    p.add_argument("--include-clean", action="store_true", help="with --kernel, also report the clean test set")
    p.add_argument("--label", help="row label (default: the variant)")
    p.add_argument("--out", help="output directory (default RUN/eval)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("degrade", help="write blurred copies of a manifest's images"), config=False)
    p.add_argument("--in", dest="input", required=True, help="manifest or split CSV")
    p.add_argument("--kernel", type=int, action="append", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("report", help="collect metrics.json files into one table")
    p.add_argument("--in", dest="input", nargs="+", required=True, help="metrics.json files or directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def error_record(command: str | None, exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "command": command,
            "exit_code": 1, "tool_version": __version__}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ProtocolError, FileNotFoundError, ValueError, RuntimeError, OSError, KeyError) as e:
        log.debug("%s", traceback.format_exc())
        print(json.dumps(error_record(args.command, e)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
