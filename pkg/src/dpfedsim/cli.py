"""Experiment front door.

Subcommands: train, budget, probe, partition-audit.  Configuration is a
flat key=value text file (one pair per line, '#' comments) merged with
repeatable --set overrides; a JSON run manifest written before training
captures the fully resolved config so any run can be reproduced
bit-exactly from (manifest, dataset file).  Output files are written to
a temp path and renamed, so they appear complete or not at all.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, federation, metrics, nn, privacy


class ConfigError(ValueError):
    """Base for configuration problems."""


class UnknownKeyError(ConfigError):
    pass


class ValueRangeError(ConfigError):
    pass


class MethodSparsityError(ConfigError):
    """Sparsity requested for a method that does not sparsify."""


# Defaults follow the reference experiment protocol: 500 clients sampled at
# 10%, sigma 0.95, C 0.2, rho 0.5, lr 0.1 with decay 0.005 and momentum 0.5,
# 30 local epochs, batch 32, delta = 1/clients.
DEFAULTS: dict[str, object] = {
    "method": "dp-fedsam",
    "clients": 500,
    "sample_ratio": 0.1,
    "rounds": 200,
    "local_epochs": 30,
    "batch_size": 32,
    "learning_rate": 0.1,
    "lr_decay": 0.005,
    "momentum": 0.5,
    "rho": 0.5,
    "clip_bound": 0.2,
    "sigma": 0.95,
    "delta": 0.0,  # 0 means: use 1/clients
    "sparsity": 1.0,
    "seed": 0,
    "hidden": "64",
    "dataset": "synthetic",
    "classes": 10,
    "input_dim": 20,
    "examples": 20000,
    "separation": 2.0,
    "test_fraction": 0.2,
    "partition": "iid",
    "dirichlet_alpha": 0.6,
}

_INT_KEYS = {"clients", "rounds", "local_epochs", "batch_size", "seed", "classes",
             "input_dim", "examples"}
_FLOAT_KEYS = {"sample_ratio", "learning_rate", "lr_decay", "momentum", "rho",
               "clip_bound", "sigma", "delta", "sparsity", "separation",
               "test_fraction", "dirichlet_alpha"}
_STR_KEYS = {"method", "hidden", "dataset", "partition"}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration (training plus data provisioning)."""

    federation: federation.FederationConfig
    dataset: str
    classes: int
    input_dim: int
    examples: int
    separation: float
    test_fraction: float
    partition: str
    dirichlet_alpha: float

    def to_flat(self) -> dict[str, object]:
        fed = self.federation
        return {
            "method": fed.method,
            "clients": fed.total_clients,
            "sample_ratio": fed.sample_ratio,
            "rounds": fed.rounds,
            "local_epochs": fed.local_epochs,
            "batch_size": fed.batch_size,
            "learning_rate": fed.learning_rate,
            "lr_decay": fed.lr_decay,
            "momentum": fed.momentum,
            "rho": fed.rho,
            "clip_bound": fed.privacy.clip_bound,
            "sigma": fed.privacy.noise_multiplier,
            "delta": fed.privacy.delta,
            "sparsity": fed.sparsity,
            "seed": fed.master_seed,
            "hidden": ",".join(str(w) for w in fed.arch.widths[1:-1]),
            "dataset": self.dataset,
            "classes": self.classes,
            "input_dim": self.input_dim,
            "examples": self.examples,
            "separation": self.separation,
            "test_fraction": self.test_fraction,
            "partition": self.partition,
            "dirichlet_alpha": self.dirichlet_alpha,
        }


def _parse_value(key: str, raw: str) -> object:
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as exc:
        raise ValueRangeError(f"key {key!r}: cannot parse {raw!r}") from exc
    return raw


def _parse_flat_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise UnknownKeyError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw.strip())
    return values


def _validate(values: dict[str, object]) -> None:
    checks = [
        ("sample_ratio", lambda v: 0 < v <= 1, "must be in (0, 1]"),
        ("clients", lambda v: v >= 1, "must be >= 1"),
        ("rounds", lambda v: v >= 1, "must be >= 1"),
        ("local_epochs", lambda v: v >= 1, "must be >= 1"),
        ("batch_size", lambda v: v >= 1, "must be >= 1"),
        ("learning_rate", lambda v: v >= 0, "must be >= 0"),
        ("lr_decay", lambda v: v >= 0, "must be >= 0"),
        ("momentum", lambda v: 0 <= v < 1, "must be in [0, 1)"),
        ("rho", lambda v: v >= 0, "must be >= 0"),
        ("clip_bound", lambda v: v > 0, "must be > 0"),
        ("sigma", lambda v: v >= 0, "must be >= 0"),
        ("delta", lambda v: 0 <= v < 1, "must be in [0, 1)"),
        ("sparsity", lambda v: 0 < v <= 1, "must be in (0, 1]"),
        ("classes", lambda v: v >= 2, "must be >= 2"),
        ("input_dim", lambda v: v >= 1, "must be >= 1"),
        ("examples", lambda v: v >= 2, "must be >= 2"),
        ("separation", lambda v: v >= 0, "must be >= 0"),
        ("test_fraction", lambda v: 0 < v < 1, "must be in (0, 1)"),
        ("dirichlet_alpha", lambda v: v > 0, "must be > 0"),
    ]
    for key, ok, msg in checks:
        if not ok(values[key]):
            raise ValueRangeError(f"key {key!r} {msg}, got {values[key]!r}")
    if values["method"] not in federation.METHODS:
        raise ValueRangeError(
            f"key 'method' must be one of {federation.METHODS}, got {values['method']!r}"
        )
    if values["partition"] not in ("iid", "dirichlet"):
        raise ValueRangeError(
            f"key 'partition' must be 'iid' or 'dirichlet', got {values['partition']!r}"
        )
    sparse = values["method"] in ("dp-fedsam-topk", "fed-smp-topk", "fed-smp-randk")
    if not sparse and values["sparsity"] != 1.0:
        raise MethodSparsityError(
            f"method {values['method']!r} does not sparsify; sparsity must be 1"
        )


def _build(values: dict[str, object]) -> RunConfig:
    _validate(values)
    try:
        hidden = tuple(int(h) for h in str(values["hidden"]).split(",") if h.strip())
    except ValueError as exc:
        raise ValueRangeError(f"key 'hidden': cannot parse {values['hidden']!r}") from exc
    arch = nn.MlpArchitecture((values["input_dim"], *hidden, values["classes"]))
    delta = values["delta"] if values["delta"] > 0 else 1.0 / values["clients"]
    spec = privacy.PrivacySpec(
        clip_bound=values["clip_bound"],
        noise_multiplier=values["sigma"],
        sample_ratio=values["sample_ratio"],
        delta=delta,
        total_clients=values["clients"],
    )
    fed = federation.FederationConfig(
        arch=arch,
        method=values["method"],
        total_clients=values["clients"],
        sample_ratio=values["sample_ratio"],
        rounds=values["rounds"],
        local_epochs=values["local_epochs"],
        batch_size=values["batch_size"],
        learning_rate=values["learning_rate"],
        lr_decay=values["lr_decay"],
        momentum=values["momentum"],
        rho=values["rho"],
        sparsity=values["sparsity"],
        privacy=spec,
        master_seed=values["seed"],
    )
    return RunConfig(
        federation=fed,
        dataset=str(values["dataset"]),
        classes=values["classes"],
        input_dim=values["input_dim"],
        examples=values["examples"],
        separation=values["separation"],
        test_fraction=values["test_fraction"],
        partition=str(values["partition"]),
        dirichlet_alpha=values["dirichlet_alpha"],
    )


def parse_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """defaults <- config file <- --set overrides, then full validation.

    `path` may be a flat key=value file or a previously written JSON run
    manifest (recognized by a leading '{'), which reproduces that run.
    """
    values = dict(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            manifest = json.loads(text)
            file_values = {
                k: _parse_value(k, str(v)) if not isinstance(v, (int, float)) else v
                for k, v in manifest["config"].items()
            }
            for key in file_values:
                if key not in DEFAULTS:
                    raise UnknownKeyError(f"unknown config key {key!r} in manifest")
            values.update(file_values)
        else:
            values.update(_parse_flat_text(text))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise UnknownKeyError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw.strip())
    return _build(values)


# ---------------------------------------------------------------------------
# Data provisioning.

def provision(cfg: RunConfig) -> tuple[data.Dataset, data.Dataset, data.Partition]:
    """(train, test, partition of train) for a resolved config."""
    seed = cfg.federation.master_seed
    if cfg.dataset == "synthetic":
        from .rng import DATA, derive_seed

        full = data.generate_synthetic(
            cfg.classes, cfg.input_dim, cfg.examples, cfg.separation,
            derive_seed(seed, DATA),
        )
    else:
        full = data.load_dataset(cfg.dataset)
        if full.num_classes != cfg.classes or full.input_dim != cfg.input_dim:
            raise ConfigError(
                f"dataset file has {full.num_classes} classes / dim "
                f"{full.input_dim}, config says {cfg.classes} / {cfg.input_dim}"
            )
    n_test = max(1, int(round(cfg.test_fraction * len(full))))
    if n_test >= len(full):
        raise ValueRangeError("test fraction leaves no training data")
    train = full.subset(np.arange(0, len(full) - n_test))
    test = full.subset(np.arange(len(full) - n_test, len(full)))

    from .rng import PARTITION, derive_seed

    part_seed = derive_seed(seed, PARTITION)
    if cfg.partition == "iid":
        part = data.partition_iid(train, cfg.federation.total_clients, part_seed)
    else:
        part = data.partition_dirichlet(
            train, cfg.federation.total_clients, cfg.dirichlet_alpha, part_seed
        )
    return train, test, part


# ---------------------------------------------------------------------------
# Atomic output helpers.

def _atomic_write(path: Path, payload: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _write_manifest(cfg: RunConfig, out_dir: Path, workers: int) -> Path:
    manifest = {
        "format": "dpfedsim-run-manifest-v1",
        "config": cfg.to_flat(),
        "master_seed": cfg.federation.master_seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "workers": workers,
        "outputs": {
            "records": "records.csv",
            "model": "model.bin",
            "privacy": "privacy.json",
        },
    }
    path = out_dir / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_train(cfg: RunConfig, out_dir: Path, workers: int = 1) -> int:
    train, test, part = provision(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out_dir, workers)

    records, final_w = federation.run_experiment(
        cfg.federation, train, part, test, workers=workers, return_final_model=True
    )
    _atomic_write(out_dir / "records.csv", federation.records_csv(records))

    tmp_model = out_dir / "model.bin.tmp"
    data.save_model(final_w, tmp_model)
    os.replace(tmp_model, out_dir / "model.bin")

    final = records[-1]
    spec = cfg.federation.privacy
    report = {
        "rounds": cfg.federation.rounds,
        "q": spec.sample_ratio,
        "sigma": spec.noise_multiplier,
        "delta": spec.delta,
        "epsilon": final.epsilon,
        "best_order": privacy.epsilon_after(
            cfg.federation.rounds, spec.sample_ratio, spec.noise_multiplier, spec.delta
        )[1]
        if spec.noise_multiplier > 0
        else None,
        "final_test_accuracy": final.test_accuracy,
        "final_test_loss": final.test_loss,
    }
    _atomic_write(
        out_dir / "privacy.json", json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    return 0


def cmd_budget(
    q: float, sigma: float, delta: float, rounds: list[int], out: Path | None
) -> int:
    rows = privacy.budget_table(q, sigma, delta, rounds)
    text = privacy.budget_table_csv(rows)
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(out, text)
    return 0


PROBES = ("sharpness", "landscape")


def cmd_probe(
    run_dir: Path,
    probe: str,
    out_dir: Path | None = None,
    radii: list[float] | None = None,
    directions: int = 8,
    extent: float = 1.0,
    resolution: int = 21,
    probe_seed: int = 0,
) -> int:
    """Run a probe against a finished run's final model and test data."""
    if probe not in PROBES:
        raise ConfigError(f"unknown probe {probe!r}; valid probes: {', '.join(PROBES)}")
    cfg = parse_config(str(run_dir / "manifest.json"))
    w = data.load_model(run_dir / "model.bin")
    if w.shape[0] != cfg.federation.arch.param_count:
        raise ConfigError(
            f"model file has {w.shape[0]} parameters, manifest architecture "
            f"needs {cfg.federation.arch.param_count}"
        )
    _, test, _ = provision(cfg)
    test_batch = nn.Batch(test.inputs, test.labels, test.num_classes)
    out_dir = out_dir or run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    if probe == "sharpness":
        radii = radii or [0.0, 0.05, 0.1, 0.2, 0.5, 1.0]
        result = metrics.sharpness_probe(
            w, cfg.federation.arch, test_batch, radii, directions, probe_seed
        )
        lines = [
            f"# sharpness probe: directions={result.directions} seed={probe_seed} "
            f"base_loss={result.base_loss!r}",
            "radius,mean_loss_increase",
        ]
        for r, inc in zip(result.radii, result.mean_increase):
            lines.append(f"{float(r)!r},{float(inc)!r}")
        _atomic_write(out_dir / "sharpness.csv", "\n".join(lines) + "\n")
    else:
        grid = metrics.landscape_slice(
            w, cfg.federation.arch, test_batch, extent, resolution, probe_seed
        )
        lines = [
            f"# landscape slice: extent={extent!r} resolution={resolution} "
            f"seed={probe_seed}"
        ]
        for row in grid:
            lines.append(",".join(repr(float(v)) for v in row))
        _atomic_write(out_dir / "landscape.csv", "\n".join(lines) + "\n")
    return 0


def cmd_partition_audit(cfg: RunConfig, out: Path | None) -> int:
    _, _, part = provision(cfg)
    text = json.dumps(data.partition_manifest(part), indent=0, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(out, text)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing.

def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="flat key=value config file or run manifest")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    sub.add_argument("--seed", type=int, default=None, help="override the master seed")


def _resolved_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfedsim",
        description="Deterministic simulator of client-level DP federated learning.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="run a federated training experiment")
    _add_config_flags(p_train)
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--workers", type=int, default=1,
                         help="worker threads for client rounds (does not affect outputs)")

    p_budget = subs.add_parser("budget", help="tabulate the accumulated privacy budget")
    p_budget.add_argument("--q", type=float, required=True, help="client sampling ratio")
    p_budget.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p_budget.add_argument("--delta", type=float, required=True, help="failure probability")
    p_budget.add_argument(
        "--rounds",
        required=True,
        help="comma-separated round counts, e.g. 0,100,200,300",
    )
    p_budget.add_argument("--out", default=None, help="CSV output path (default stdout)")

    p_probe = subs.add_parser("probe", help="probe a finished run's final model")
    p_probe.add_argument("--run", required=True, help="run directory with manifest.json and model.bin")
    p_probe.add_argument("--probe", required=True, help=f"one of: {', '.join(PROBES)}")
    p_probe.add_argument("--out", default=None, help="output directory (default: run dir)")
    p_probe.add_argument("--radii", default=None, help="comma-separated radii for sharpness")
    p_probe.add_argument("--directions", type=int, default=8)
    p_probe.add_argument("--extent", type=float, default=1.0)
    p_probe.add_argument("--resolution", type=int, default=21)
    p_probe.add_argument("--probe-seed", type=int, default=0)

    p_audit = subs.add_parser("partition-audit", help="export the client partition manifest")
    _add_config_flags(p_audit)
    p_audit.add_argument("--out", default=None, help="JSON output path (default stdout)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = _resolved_config(args)
            return cmd_train(cfg, Path(args.out), workers=args.workers)
        if args.command == "budget":
            rounds = [int(r) for r in args.rounds.split(",") if r.strip()]
            out = Path(args.out) if args.out else None
            return cmd_budget(args.q, args.sigma, args.delta, rounds, out)
        if args.command == "probe":
            radii = (
                [float(r) for r in args.radii.split(",") if r.strip()]
                if args.radii
                else None
            )
            out = Path(args.out) if args.out else None
            return cmd_probe(
                Path(args.run),
                args.probe,
                out,
                radii=radii,
                directions=args.directions,
                extent=args.extent,
                resolution=args.resolution,
                probe_seed=args.probe_seed,
            )
        if args.command == "partition-audit":
            cfg = _resolved_config(args)
            out = Path(args.out) if args.out else None
            return cmd_partition_audit(cfg, out)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, data.DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"dpfedsim: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
