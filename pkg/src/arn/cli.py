"""Command-line entry points: gen-data, train, ablate, eval, check-grads.

Config files are flat YAML mappings. Keys are the fields of SynthConfig,
ModelConfig, TrainConfig and LossWeights, plus a few run-level keys
(``ablation``, ``protocol``, ``dataset``, ``evaluate_each_epoch``,
``seeds``). The synthetic generator seed is ``data_seed`` so that it does
not collide with the training ``seed``.

Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .core import (
    VARIANT_LABELS,
    VARIANTS,
    ConfigError,
    DatasetSplit,
    LabelAccessError,
    LossWeights,
    ModelConfig,
    TrainConfig,
    UsageError,
)
from .data import DataError, SynthConfig, dataset_stats, export_directory, generate_synthetic, load_split
from .evaluator import REPORT_RANKS, evaluate
from .losses import LOSS_NAMES, loss_gradient_checks
from .network import build_model, load_checkpoint
from .trainer import NumericError, fit, run_ablation_suite

log = logging.getLogger("arn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADS = 0, 2, 3, 4, 5
PROTOCOLS = ("plain", "cross_camera")
RUN_KEYS = {
    "ablation": "full",
    "protocol": "cross_camera",
    "dataset": None,
    "evaluate_each_epoch": False,
    "seeds": [0, 1, 2, 3, 4],
}
# desk-scale preset under every config file; the dataclass defaults keep the published
# weights and learning rates, which diverge on 32 x 32 synthetic data
DESK_DEFAULTS = {
    "epochs": 40,
    "lr_backbone": 0.003,
    "lr_encoders": 0.01,
    "lr_classifier": 0.02,
    "momentum": 0.9,
    "backbone_warmup_epochs": 10,
    "alpha": 1.0,
    "beta": 10.0,
    "gamma": 0.05,
}
SYNTH_RENAMES = {"data_seed": "seed"}
TUPLE_FIELDS = {"image_shape", "feature_map_shape", "encoder_channels"}


class GradCheckFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig
    model: ModelConfig
    train: TrainConfig
    weights: LossWeights
    run: dict
    raw: dict = field(default_factory=dict)

    @property
    def ablation(self) -> str:
        return self.run["ablation"]


def _known_keys() -> dict[str, str]:
    owners = {}
    for f in fields(SynthConfig):
        owners["data_seed" if f.name == "seed" else f.name] = "synth"
    for cls, owner in ((ModelConfig, "model"), (TrainConfig, "train"), (LossWeights, "weights")):
        for f in fields(cls):
            if f.name != "ablation":
                owners.setdefault(f.name, owner)
    for key in RUN_KEYS:
        owners[key] = "run"
    return owners


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Parse a flat YAML config; unknown keys and invalid values raise ConfigError."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping of keys to values")
    raw = {**DESK_DEFAULTS, **raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    owners = _known_keys()
    unknown = sorted(set(raw) - set(owners))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    parts: dict[str, dict] = {"synth": {}, "model": {}, "train": {}, "weights": {}, "run": dict(RUN_KEYS)}
    for key, value in raw.items():
        if key in TUPLE_FIELDS:
            value = tuple(value)
        parts[owners[key]][SYNTH_RENAMES.get(key, key)] = value
        # image_shape is shared by the generator and the model
        if key == "image_shape":
            parts["model"][key] = value
    if parts["run"]["ablation"] not in VARIANTS:
        raise ConfigError(f"ablation: unknown variant {parts['run']['ablation']!r}; expected one of {sorted(VARIANTS)}")
    if parts["run"]["protocol"] not in PROTOCOLS:
        raise ConfigError(f"protocol: expected one of {PROTOCOLS}, got {parts['run']['protocol']!r}")
    try:
        synth = SynthConfig(**parts["synth"])
        model = ModelConfig(**parts["model"])
        train = TrainConfig(ablation=VARIANTS[parts["run"]["ablation"]], **parts["train"])
        weights = LossWeights(**parts["weights"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    problems = synth.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    return RunConfig(synth, model, train, weights, parts["run"], raw)


def resolve_split(cfg: RunConfig) -> tuple[DatasetSplit, RunConfig]:
    """Load or generate the data, then fit num_classes to the source identities unless it was set."""
    if cfg.run["dataset"]:
        split = load_split(cfg.run["dataset"])
    else:
        split = generate_synthetic(cfg.synth)
    if "num_classes" not in cfg.raw:
        cfg = replace(cfg, model=replace(cfg.model, num_classes=len(split.source_identities)))
    image_shape = tuple(split.train_source[0].image.shape)
    if image_shape != cfg.model.image_shape:
        raise ConfigError(f"data image shape {image_shape} does not match model image_shape {cfg.model.image_shape}")
    return split, cfg


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


class RunManifest:
    """Config snapshot, seed, version, outputs and timings of one run, kept in manifest.json."""

    def __init__(self, out: Path, command: str, config: dict, seed, flags=None):
        self.out = out
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "ablation_flags": asdict(flags) if flags is not None else None,
            "version": _version(),
            "outputs": {},
            "timings": {},
            "status": "running",
        }
        self._t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)
        self.save()

    def add_output(self, key: str, path: Path) -> Path:
        path = Path(path)
        if self.out.resolve() not in path.resolve().parents:
            raise UsageError(f"output {path} is outside the run directory {self.out}")
        self.data["outputs"][key] = str(path.relative_to(self.out))
        return path

    def finish(self, status: str = "ok") -> None:
        self.data["timings"]["total_seconds"] = round(time.perf_counter() - self._t0, 3)
        self.data["status"] = status
        self.save()

    def save(self) -> None:
        _write_json(self.out / "manifest.json", self.data)


def _snapshot(cfg: RunConfig) -> dict:
    synth = asdict(cfg.synth)
    synth["data_seed"] = synth.pop("seed")
    train = asdict(cfg.train)
    train.pop("ablation")
    return {**synth, **asdict(cfg.model), **train, **asdict(cfg.weights), **cfg.run}


def write_cmc(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "accuracy"])
        for k, acc in enumerate(curve, start=1):
            writer.writerow([k, repr(float(acc))])


def plot_cmc(path: Path, curve) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", ms=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _emit_metrics(manifest: RunManifest, metrics: dict, curve, plot: bool) -> None:
    _write_json(manifest.add_output("metrics", manifest.out / "metrics.json"), metrics)
    write_cmc(manifest.add_output("cmc", manifest.out / "cmc.csv"), curve)
    if plot:
        plot_cmc(manifest.add_output("cmc_plot", manifest.out / "cmc.png"), curve)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"data_seed": args.seed})
    out = Path(args.out)
    manifest = RunManifest(out, "gen-data", _snapshot(cfg), cfg.synth.seed)
    split = generate_synthetic(cfg.synth)
    t = time.perf_counter()
    export_directory(split, manifest.add_output("dataset", out / "data"))
    manifest.data["timings"]["export_seconds"] = round(time.perf_counter() - t, 3)
    stats = dataset_stats(split)
    _write_json(manifest.add_output("stats", out / "stats.json"), stats)
    manifest.finish()
    print(render_stats(stats))
    return EXIT_OK


def render_stats(stats: dict) -> str:
    cams = sorted({c for part in stats.values() for c in part["cameras"]})
    header = f"{'split':<14}{'ids':>6}{'images':>8}" + "".join(f"{'cam ' + c:>8}" for c in cams)
    rows = [header]
    for name, part in stats.items():
        rows.append(
            f"{name:<14}{part['identities']:>6}{part['images']:>8}"
            + "".join(f"{part['cameras'].get(c, 0):>8}" for c in cams)
        )
    return "\n".join(rows)


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "ablation": args.ablation, "protocol": args.protocol})
    split, cfg = resolve_split(cfg)
    out = Path(args.out)
    manifest = RunManifest(out, "train", _snapshot(cfg), cfg.train.seed, cfg.train.ablation)
    manifest.add_output("log", out / "train_log.jsonl")
    manifest.add_output("checkpoint", out / "checkpoints" / "last.npz")
    t = time.perf_counter()
    try:
        model, _ = fit(
            split,
            cfg.model,
            cfg.train,
            cfg.weights,
            out_dir=out,
            protocol=cfg.run["protocol"],
            evaluate_each_epoch=bool(cfg.run["evaluate_each_epoch"]),
        )
    except NumericError:
        manifest.finish("numeric_error")
        raise
    manifest.data["timings"]["train_seconds"] = round(time.perf_counter() - t, 3)
    metrics, curve = evaluate(model, split.query, split.gallery, cfg.run["protocol"])
    _emit_metrics(manifest, metrics, curve, args.plot)
    manifest.finish()
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


METRIC_COLUMNS = [(f"R{k}", f"rank{k}") for k in REPORT_RANKS] + [("mAP", "mAP")]


def ablation_table(results: dict) -> list[dict]:
    """Rows with the variant label and the median R1/R5/R10/R20/mAP, as percentages rounded to 0.1."""
    rows = []
    for name, entry in results.items():
        row = {"variant": name, "label": VARIANT_LABELS[name]}
        for col, key in METRIC_COLUMNS:
            row[col] = round(100.0 * entry["median"][key], 1)
        rows.append(row)
    return rows


def render_table(rows: list[dict]) -> str:
    width = max(len(r["label"]) for r in rows) + 2
    lines = [f"{'Method':<{width}}" + "".join(f"{col:>8}" for col, _ in METRIC_COLUMNS)]
    for row in rows:
        lines.append(f"{row['label']:<{width}}" + "".join(f"{row[col]:>8.1f}" for col, _ in METRIC_COLUMNS))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, {"protocol": args.protocol})
    split, cfg = resolve_split(cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.run["seeds"])
    out = Path(args.out)
    manifest = RunManifest(out, "ablate", _snapshot(cfg), seeds)
    t = time.perf_counter()
    results = run_ablation_suite(
        split, cfg.model, cfg.train, cfg.weights, variants=tuple(VARIANTS), seeds=seeds, protocol=cfg.run["protocol"]
    )
    manifest.data["timings"]["ablation_seconds"] = round(time.perf_counter() - t, 3)
    rows = ablation_table(results)
    _write_json(manifest.add_output("table", out / "ablation.json"), {"rows": rows, "seeds": seeds, "runs": results})
    text = render_table(rows)
    manifest.add_output("table_text", out / "ablation.txt").write_text(text + "\n")
    manifest.finish()
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, {"protocol": args.protocol, "dataset": args.data})
    split, cfg = resolve_split(cfg)
    out = Path(args.out)
    manifest = RunManifest(out, "eval", {**_snapshot(cfg), "checkpoint": args.checkpoint}, cfg.train.seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        data_shape = tuple(split.query[0].image.shape)
        if model.config.image_shape != data_shape:
            raise ConfigError(
                f"checkpoint expects images of shape {model.config.image_shape} but the data has shape {data_shape}"
            )
    else:
        log.warning("no checkpoint given; evaluating an untrained model")
        model = build_model(cfg.model, use_private=True, seed=cfg.train.seed)
    metrics, curve = evaluate(model, split.query, split.gallery, cfg.run["protocol"])
    _emit_metrics(manifest, metrics, curve, args.plot)
    manifest.finish()
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_check_grads(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = loss_gradient_checks(seed, corrupt=args.corrupt)
    failed = []
    for name, res in results.items():
        status = "PASS" if res.passed else "FAIL"
        print(
            f"{name:<15} max_rel_error={res.max_rel_error:.3e} epsilon={res.epsilon:g} "
            f"coords={res.num_coords} tolerance={res.tolerance:g} {status}"
        )
        if not res.passed:
            failed.append(name)
    if failed:
        raise GradCheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arn", description="Shared/private domain adaptation for re-identification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", default=out_default, help="run directory")

    p = sub.add_parser("gen-data", help="render the synthetic dataset to a directory")
    common(p, "runs/data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and evaluate it on the target set")
    common(p, "runs/train")
    p.add_argument("--ablation", choices=sorted(VARIANTS))
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--plot", action="store_true", help="also save a CMC plot (needs matplotlib)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all four variants over the configured seeds")
    common(p, "runs/ablate")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery data")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", help="checkpoint .npz; omitted means an untrained model")
    p.add_argument("--data", help="dataset directory; default is the configured synthetic data")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grads", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", choices=LOSS_NAMES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_grads)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LabelAccessError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GradCheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADS


if __name__ == "__main__":
    sys.exit(main())
