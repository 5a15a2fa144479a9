"""Command-line interface: generate | train | sweep | certify.

Each subcommand reads one TOML config (schemas below, unknown keys
rejected), writes its outputs plus a manifest carrying the resolved
config, its hash, and output digests, and exits 0 on success, 2 on
validation errors, 3 on numeric failures. Reruns from the same config
and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib
from pathlib import Path

import numpy as np

from . import analysis as an
from . import trainer as tr
from .autodiff import NonFiniteError
from .envgen import (GaussianEnvSpec, SuiteConfig, SuiteError, load_binary,
                     load_csv, make_suite, save_binary, save_csv,
                     suite_from_datasets)
from .objectives import TRMHyper
from .solver import NeumannConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Config file fails schema validation."""


# Schema entries are (type, required, default). Tables list their own
# schema under a nested dict.
_SUITE_SCHEMA = {
    "n_envs": (int, True, None),
    "mu_c": ((int, float, list), True, None),
    "sigma_c": ((int, float), True, None),
    "sigma_e": ((int, float), False, 1.0),
    "n_samples": (int, False, 10000),
    "d_e": (int, False, 1),
    "mus": (list, False, None),
    "target_mean_mu": ((int, float), False, None),
    "target_var_mu": ((int, float), False, None),
    "bias_degree": ((int, float), False, 1.0),
    "rotate": (bool, False, False),
    "seed": (int, False, 0),
}

_GENERATE_SCHEMA = dict(_SUITE_SCHEMA, **{
    "format": (str, False, "binary"),
})

_TRAIN_SCHEMA = {
    "suite_dir": (str, False, None),
    "suite": (dict, False, None),
    "algorithm": (str, True, None),
    "iterations": (int, False, 2000),
    "seed": (int, False, 0),
    "eta_phi": ((int, float), False, 0.01),
    "eta_w": ((int, float), False, 0.01),
    "eta_alpha": ((int, float), False, 0.1),
    "momentum": ((int, float), False, 0.9),
    "optimizer": (str, False, "sgd"),
    "population_mode": (bool, False, False),
    "constrained_2d": (bool, False, False),
    "init_angle": ((int, float), False, math.pi / 4),
    "lam": ((int, float), False, 0.1),
    "variant": (str, False, "sum_sup"),
    "full_sum": (bool, False, False),
    "neumann_steps": (int, False, 10),
    "lam_irm": ((int, float), False, 10.0),
    "beta_rex": ((int, float), False, 10.0),
    "eta_dro": ((int, float), False, 0.1),
    "warmup": (int, False, 0),
    "metric_every": (int, False, 1),
    "model": (str, False, "linear"),
    "hidden_width": (int, False, 16),
    "feature_dim": (int, False, 1),
}

_SWEEP_SCHEMA = {
    "axis": (str, True, None),
    "values": (list, True, None),
    "algorithms": (list, False, ["erm", "irmv1", "trm"]),
    "seeds": (int, False, 10),
    "seed": (int, False, 0),
    "n_envs": (int, False, 5),
    "mu_c": ((int, float), False, 1.0),
    "target_mean_mu": ((int, float), False, 1.0),
    "target_var_mu": ((int, float), False, 1.0),
    "n_samples": (int, False, 1000),
    "iterations": (int, False, 2000),
    "lam_irm": ((int, float), False, 10.0),
    "beta_rex": ((int, float), False, 10.0),
}

_CERTIFY_SCHEMA = {
    "d_e": (int, True, None),
    "d_c": (int, False, 8),
    "n_envs": (int, False, 3),
    "sigma_c": ((int, float), False, 1.0),
    "mc_samples": (int, False, 1_000_000),
    "seed": (int, False, 0),
    "mu_c": (list, False, None),
    "mus": (list, False, None),
    "special_i": (int, False, 0),
    "radius": ((int, float), False, None),
    "max_widenings": (int, False, 2),
    "penalty_threshold": ((int, float), False, 0.05),
    "excess_threshold": ((int, float), False, 0.05),
    "transfer_threshold": ((int, float), False, 0.5),
}


def _type_ok(val, types) -> bool:
    if types is dict:
        return isinstance(val, dict)
    # bool subclasses int; only accept it where bool is named.
    if isinstance(val, bool):
        return types is bool or (isinstance(types, tuple) and bool in types)
    return isinstance(val, types)


def _apply_schema(raw: dict, schema: dict, where: str) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = {}
    for key, (types, required, default) in schema.items():
        if key in raw:
            if not _type_ok(raw[key], types):
                raise ConfigError(
                    f"{where}: {key} has type {type(raw[key]).__name__}")
            out[key] = raw[key]
        elif required:
            raise ConfigError(f"{where}: missing required key {key!r}")
        else:
            out[key] = default
    return out


def load_config(path, schema: dict) -> dict:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{p}: no such config file")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}")
    return _apply_schema(raw, schema, str(p))


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(config: dict) -> str:
    blob = json.dumps(_canonical(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, config: dict,
                   outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": _canonical(config),
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "outputs": {p.name: _file_digest(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _suite_config(cfg: dict) -> SuiteConfig:
    kwargs = {k: cfg[k] for k in
              ("n_envs", "mu_c", "sigma_c", "sigma_e", "n_samples", "d_e",
               "mus", "target_mean_mu", "target_var_mu", "bias_degree",
               "rotate") if cfg.get(k) is not None}
    return SuiteConfig(**kwargs)


def _resolve_out(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = load_config(args.config, _GENERATE_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["format"] not in ("binary", "csv"):
        raise ConfigError(f"format must be binary or csv, got {cfg['format']!r}")
    suite = make_suite(_suite_config(cfg), seed=cfg["seed"])
    out = _resolve_out(args, "suite_out")
    if cfg["format"] == "binary":
        data_path = out / "suite.bin"
        save_binary(suite.datasets, data_path)
    else:
        data_path = out / "suite.csv"
        save_csv(suite.datasets, data_path)
    # Resolved per-env generative parameters let a later command rebuild
    # the exact suite object from the data file alone.
    specs_path = out / "specs.json"
    with open(specs_path, "w") as fh:
        json.dump([{
            "mu_c": s.mu_c.tolist(), "mu_e": s.mu_e.tolist(),
            "sigma_c": s.sigma_c, "sigma_e": s.sigma_e,
            "n_samples": s.n_samples, "label_prior": s.label_prior,
            "bias_degree": s.bias_degree,
        } for s in suite.specs], fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "generate", cfg, [data_path, specs_path])
    print(f"wrote {data_path} ({suite.n_envs} environments, "
          f"{suite.datasets[0].n} samples each)")
    return EXIT_OK


def load_generated_suite(suite_dir):
    d = Path(suite_dir)
    with open(d / "specs.json") as fh:
        raw = json.load(fh)
    specs = [GaussianEnvSpec(**entry) for entry in raw]
    bin_path, csv_path = d / "suite.bin", d / "suite.csv"
    if bin_path.exists():
        datasets = load_binary(bin_path)
    elif csv_path.exists():
        datasets = load_csv(csv_path)
    else:
        raise ConfigError(f"{d}: no suite.bin or suite.csv")
    return suite_from_datasets(datasets, specs)


def _train_config(cfg: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        algorithm=cfg["algorithm"], iterations=cfg["iterations"],
        seed=cfg["seed"], eta_phi=cfg["eta_phi"], eta_w=cfg["eta_w"],
        eta_alpha=cfg["eta_alpha"], momentum=cfg["momentum"],
        optimizer=cfg["optimizer"], population_mode=cfg["population_mode"],
        constrained_2d=cfg["constrained_2d"], init_angle=cfg["init_angle"],
        hyper=TRMHyper(lam=cfg["lam"], variant=cfg["variant"],
                       full_sum=cfg["full_sum"],
                       neumann=NeumannConfig(steps=cfg["neumann_steps"])),
        lam_irm=cfg["lam_irm"], beta_rex=cfg["beta_rex"],
        eta_dro=cfg["eta_dro"], warmup=cfg["warmup"],
        metric_every=cfg["metric_every"], model=cfg["model"],
        hidden_width=cfg["hidden_width"], feature_dim=cfg["feature_dim"])


def cmd_train(args) -> int:
    cfg = load_config(args.config, _TRAIN_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if (cfg["suite_dir"] is None) == (cfg["suite"] is None):
        raise ConfigError("exactly one of suite_dir or [suite] required")
    if cfg["suite_dir"] is not None:
        suite = load_generated_suite(cfg["suite_dir"])
    else:
        inner = _apply_schema(cfg["suite"], _SUITE_SCHEMA, "[suite]")
        suite = make_suite(_suite_config(inner), seed=inner["seed"])
    config = _train_config(cfg)
    out = _resolve_out(args, "train_out")
    metrics_path = out / "metrics.csv"
    ckpt_path = out / "model.ckpt"
    try:
        model, metrics = tr.train(suite, config)
    except tr.TrainerError as exc:
        print(f"training aborted at iteration {exc.iteration}: {exc}",
              file=sys.stderr)
        if exc.metrics is not None:
            exc.metrics.to_csv(metrics_path)
        if exc.model is not None:
            tr.save_checkpoint(ckpt_path, exc.model, config)
        return EXIT_NUMERIC
    metrics.to_csv(metrics_path)
    tr.save_checkpoint(ckpt_path, model, config)
    write_manifest(out, "train", cfg, [metrics_path, ckpt_path])
    final = tr.predictor_distance(model, suite)
    print(f"wrote {metrics_path} ({len(metrics.rows)} rows); "
          f"final pred_distance {final:.6g}")
    return EXIT_OK


def _sweep_kwargs(cfg: dict) -> dict:
    return {"n_envs": cfg["n_envs"], "mu_c": cfg["mu_c"],
            "algorithms": tuple(cfg["algorithms"]),
            "target_mean_mu": cfg["target_mean_mu"],
            "target_var_mu": cfg["target_var_mu"],
            "n_samples": cfg["n_samples"], "iterations": cfg["iterations"],
            "lam_irm": cfg["lam_irm"], "beta_rex": cfg["beta_rex"]}


def _cell_worker(item):
    axis, value, seed, kwargs = item
    return (value, seed), an.sweep_cell(axis, value, seed, **kwargs)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _SWEEP_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["axis"] not in ("mu_c", "n_envs"):
        raise ConfigError(f"axis must be mu_c or n_envs, got {cfg['axis']!r}")
    for alg in cfg["algorithms"]:
        if alg not in tr.ALGORITHMS:
            raise ConfigError(f"unknown algorithm {alg!r}")
    values = [float(v) for v in cfg["values"]]
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    kwargs = _sweep_kwargs(cfg)
    items = [(cfg["axis"], v, s, kwargs) for v in values for s in seeds]
    jobs = args.jobs or os.cpu_count() or 1
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = dict(pool.map(_cell_worker, items))
    else:
        cells = dict(map(_cell_worker, items))
    result = an.assemble_sweep(cfg["axis"], values, seeds,
                               tuple(cfg["algorithms"]), cells)
    out = _resolve_out(args, "sweep_out")
    raw_path = out / "sweep_raw.csv"
    summary_path = out / "sweep_summary.csv"
    result.to_csv(raw_path)
    result.summary_csv(summary_path)
    write_manifest(out, "sweep", cfg, [raw_path, summary_path])
    print(result.summary())
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = load_config(args.config, _CERTIFY_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["mu_c"] is not None and cfg["mus"] is not None:
        spec = an.ConstructionSpec(
            d_c=cfg["d_c"], d_e=cfg["d_e"], mu_c=np.asarray(cfg["mu_c"]),
            mus=np.asarray(cfg["mus"]), sigma_c=cfg["sigma_c"],
            special_i=cfg["special_i"], radius=cfg["radius"],
            mc_samples=cfg["mc_samples"])
        spec.validate()
    elif cfg["mu_c"] is None and cfg["mus"] is None:
        spec = an.default_construction(
            d_e=cfg["d_e"], d_c=cfg["d_c"], n_envs=cfg["n_envs"],
            sigma_c=cfg["sigma_c"], mc_samples=cfg["mc_samples"])
    else:
        raise ConfigError("mu_c and mus must be given together or not at all")
    clf = an.build_counterexample(spec)
    cert = an.certify_counterexample(
        clf, spec, seed=cfg["seed"], max_widenings=cfg["max_widenings"],
        penalty_threshold=cfg["penalty_threshold"],
        excess_threshold=cfg["excess_threshold"],
        transfer_threshold=cfg["transfer_threshold"])
    out = _resolve_out(args, "certify_out")
    csv_path = out / "certificate.csv"
    txt_path = out / "certificate.txt"
    cert.to_csv(csv_path)
    with open(txt_path, "w") as fh:
        fh.write(cert.summary() + "\n")
    write_manifest(out, "certify", cfg, [csv_path, txt_path])
    print(cert.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xrisk",
        description="transfer-risk training, sweeps, and certificates")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--jobs", type=int, default=None,
                        help="process pool size for sweeps (default: cores)")
    parser.add_argument("--out", type=str, default=None,
                        help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("sweep", cmd_sweep), ("certify", cmd_certify)):
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML config path")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SuiteError, an.ConstructionError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (tr.TrainerError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
