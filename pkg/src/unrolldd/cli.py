"""Command-line front end.

Subcommands: `distill` runs an outer optimization from an INI config and
writes the run directory (resolved config, per-epoch CSV, report JSON,
synthetic-set image plus exact sidecar), `eval` retrains models on a
saved synthetic set after verifying its checksum, `verify` runs the
oracle cross-check battery, and `bench` writes the cost-model CSV
comparing low-rank and dense Hessian application.

Config files are strict: an unknown section or key is a hard error that
names the file and line.  Seeds fan out from [run] master_seed through
named streams, so a rerun with the same config and seed reproduces the
per-epoch CSV byte for byte.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import re
import sys
import time

import numpy as np

from . import data as data_mod
from . import distill as ds
from . import lrha as lr
from . import models
from . import oracle
from . import schedule as sched
from .innerloop import STRATEGIES, UnrollConfig
from .lrha import HvpCounter, LrhaConfig
from .psp import PspConfig


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    states = configparser.ConfigParser.BOOLEAN_STATES
    key = s.strip().lower()
    if key not in states:
        raise ValueError(f"not a boolean: '{s}'")
    return states[key]


def _str(s):
    return s.strip()


def _ints(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(int(part) for part in s.split(","))


def _floats(s):
    return tuple(float(part) for part in s.strip().split(","))


# section -> key -> (parser, default); a None default marks a required key
_SCHEMA = {
    "run": {
        "strategy": (_str, "at-bptt"),
        "epochs": (_int, None),
        "master_seed": (_int, 0),
    },
    "data": {
        "task": (_str, "blobs"),
        "classes": (_int, 3),
        "per_class": (_int, 200),
        "dim": (_int, 16),
        "separation": (_float, 4.0),
        "cluster_std": (_float, 1.0),
        "image_side": (_int, 0),
        "images_path": (_str, ""),
        "labels_path": (_str, ""),
        "path": (_str, ""),
        "fractions": (_floats, (0.6, 0.2, 0.2)),
        "zca": (_bool, False),
        "zca_lambda": (_float, 0.1),
        "augment": (_bool, False),
    },
    "model": {
        "family": (_str, "dense-mlp"),
        "widths": (_ints, ()),
        "activation": (_str, "relu"),
    },
    "inner": {
        "steps": (_int, None),
        "alpha": (_float, None),
        "optimizer": (_str, "sgd"),
        "beta1": (_float, 0.9),
        "beta2": (_float, 0.999),
        "adam_eps": (_float, 1e-8),
    },
    "schedule": {
        "window": (_int, 8),
        "window_range": (_int, 2),
        "tau": (_float, 1.0),
        "thresh_early": (_float, 1.5),
        "thresh_mid": (_float, 1.0),
        "stage1_pct": (_float, 0.3),
        "stage2_pct": (_float, 0.3),
        "standardize": (_bool, True),
    },
    "lrha": {
        "enabled": (_bool, False),
        "k_min": (_int, 4),
        "k_max_fraction": (_float, 0.1),
        "redraw_on_qr_failure": (_bool, True),
    },
    "psp": {
        "enabled": (_bool, False),
        "n": (_int, 4),
        "lam": (_float, 0.1),
        "min_side": (_int, 32),
    },
    "outer": {
        "lr": (_float, 0.01),
        "clip_norm": (_float, 1.0),
        "ema_decay": (_float, 0.99),
        "ema_eval": (_bool, True),
        "ema_inner": (_bool, False),
        "ipc": (_int, 1),
        "init_mode": (_str, "gaussian"),
        "val_batch": (_int, 64),
        "eval_seeds": (_int, 5),
        "eval_steps": (_int, 200),
        "eval_lr": (_float, 0.01),
        "eval_optimizer": (_str, "adam"),
    },
}


def _line_of(lines, section, key=None) -> int:
    """First line number declaring the section, or a key inside it."""
    current = None
    for i, raw in enumerate(lines, 1):
        stripped = raw.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if key is None and current == section:
                return i
        elif key is not None and current == section and stripped and not stripped.startswith(("#", ";")):
            if re.match(rf"^{re.escape(key)}\s*[=:]", stripped):
                return i
    return 0


def load_config(path) -> dict:
    """Parse and validate an INI config into a nested dict of typed values."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    lines = text.splitlines()

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"{path}:{_line_of(lines, section)}: unknown section [{section}]"
            )
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"{path}:{_line_of(lines, section, key)}: "
                    f"unknown key '{key}' in [{section}]"
                )

    resolved: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        resolved[section] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    resolved[section][key] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"{path}:{_line_of(lines, section, key)}: "
                        f"bad value for '{key}': {exc}"
                    ) from exc
            elif default is None:
                where = _line_of(lines, section) or 1
                raise ConfigError(
                    f"{path}:{where}: missing required key '{key}' in [{section}]"
                )
            else:
                resolved[section][key] = default
    return resolved


def write_resolved(path, cfg: dict):
    out = configparser.ConfigParser(interpolation=None)
    for section in _SCHEMA:
        out[section] = {}
        for key in _SCHEMA[section]:
            value = cfg[section][key]
            if isinstance(value, tuple):
                value = ",".join(format(v, ".17g") if isinstance(v, float) else str(v)
                                 for v in value)
            elif isinstance(value, float):
                value = format(value, ".17g")
            out[section][key] = str(value)
    with open(path, "w", encoding="utf-8") as fh:
        out.write(fh)


# ---------------------------------------------------------------------------
# building runs from a config
# ---------------------------------------------------------------------------

def build_data(cfg: dict):
    """Materialize (train, val, test) datasets per the [data] section."""
    d = cfg["data"]
    master = cfg["run"]["master_seed"]
    task = d["task"]
    if task == "blobs":
        full = data_mod.make_blobs(
            classes=d["classes"], per_class=d["per_class"], dim=d["dim"],
            separation=d["separation"], seed=ds.seed_int(master, "data"),
            cluster_std=d["cluster_std"],
            image_side=d["image_side"] or None,
        )
    elif task == "idx":
        if not d["images_path"] or not d["labels_path"]:
            raise ConfigError("idx task needs images_path and labels_path")
        full = data_mod.load_idx_images(d["images_path"], d["labels_path"])
    elif task == "csv":
        if not d["path"]:
            raise ConfigError("csv task needs path")
        full = data_mod.load_csv(d["path"])
    else:
        raise ConfigError(f"unknown data task '{task}'")

    if d["augment"] and full.x.ndim == 4 and full.x.shape[1] == full.x.shape[2]:
        rng = ds.seed_stream(master, "augment")
        extra = ds.augment(full.x, rng)
        full = data_mod.LabeledDataset(
            x=np.concatenate([full.x, extra]),
            y=np.concatenate([full.y, full.y]),
            classes=full.classes,
        )

    train, val, test = data_mod.split(full, d["fractions"], ds.seed_int(master, "split"))
    transform = None
    if d["zca"]:
        _, transform = ds.zca_whiten(train.x, d["zca_lambda"])
        train = data_mod.LabeledDataset(transform.apply(train.x), train.y, train.classes)
        val = data_mod.LabeledDataset(transform.apply(val.x), val.y, val.classes)
        test = data_mod.LabeledDataset(transform.apply(test.x), test.y, test.classes)
    return train, val, test, transform


def build_model_spec(cfg: dict, train) -> models.ModelSpec:
    m = cfg["model"]
    return models.ModelSpec(
        family=m["family"], input_shape=train.feature_shape,
        classes=train.classes, widths=m["widths"], activation=m["activation"],
    )


def build_outer_config(cfg: dict) -> ds.OuterConfig:
    run, inner, s, o = cfg["run"], cfg["inner"], cfg["schedule"], cfg["outer"]
    epochs = run["epochs"]
    schedule_cfg = sched.ScheduleConfig(
        window=s["window"], window_range=s["window_range"], tau=s["tau"],
        thresh_early=s["thresh_early"], thresh_mid=s["thresh_mid"],
        count_early=max(1, int(round(s["stage1_pct"] * epochs))),
        count_mid=max(1, int(round(s["stage2_pct"] * epochs))),
        standardize=s["standardize"],
    )
    lcfg = cfg["lrha"]
    pcfg = cfg["psp"]
    return ds.OuterConfig(
        strategy=run["strategy"],
        epochs=epochs,
        inner=UnrollConfig(
            steps=inner["steps"], alpha=inner["alpha"], optimizer=inner["optimizer"],
            beta1=inner["beta1"], beta2=inner["beta2"], adam_eps=inner["adam_eps"],
        ),
        schedule_cfg=schedule_cfg,
        lrha_cfg=LrhaConfig(
            enabled=lcfg["enabled"], k_min=lcfg["k_min"],
            k_max_fraction=lcfg["k_max_fraction"],
            redraw_on_qr_failure=lcfg["redraw_on_qr_failure"],
        ),
        psp_cfg=PspConfig(
            enabled=pcfg["enabled"], n=pcfg["n"], lam=pcfg["lam"],
            min_side=pcfg["min_side"],
        ),
        outer_lr=o["lr"], clip_norm=o["clip_norm"], ema_decay=o["ema_decay"],
        ema_eval=o["ema_eval"], ema_inner=o["ema_inner"], ipc=o["ipc"],
        init_mode=o["init_mode"], val_batch=o["val_batch"],
        eval_seeds=o["eval_seeds"], eval_steps=o["eval_steps"],
        eval_lr=o["eval_lr"], eval_optimizer=o["eval_optimizer"],
        master_seed=run["master_seed"],
    )


def _run_dir(args, cfg) -> str:
    if args.out:
        return args.out
    root = os.environ.get("UNROLLDD_OUT_ROOT", "runs")
    stem = os.path.splitext(os.path.basename(args.config))[0]
    return os.path.join(root, f"{stem}-seed{cfg['run']['master_seed']}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["master_seed"] = args.seed
    run_dir = _run_dir(args, cfg)
    os.makedirs(run_dir, exist_ok=True)
    write_resolved(os.path.join(run_dir, "config.resolved.ini"), cfg)

    train, val, test, _ = build_data(cfg)
    spec = build_model_spec(cfg, train)
    ocfg = build_outer_config(cfg)

    chosen, report, _ = ds.run_distillation(train, val, test, spec, ocfg)
    baseline = ds.random_subset_baseline(
        train, ocfg.ipc, ds.seed_int(ocfg.master_seed, "baseline")
    )
    baseline_eval = ds.evaluate(baseline, test, spec, ocfg)

    ds.write_epoch_csv(os.path.join(run_dir, "epochs.csv"), report.records)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "report": report.to_dict(),
                "baseline_eval": baseline_eval.to_dict(),
                "run_dir": run_dir,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    ds.dump_synthetic(run_dir, chosen)

    final = report.final_eval
    print(f"run dir: {run_dir}")
    if final is not None:
        print(f"distilled accuracy: {final.mean:.4f} +/- {final.std:.4f}")
    print(f"baseline accuracy:  {baseline_eval.mean:.4f} +/- {baseline_eval.std:.4f}")
    print(f"hvp total: {report.hvp_total}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["master_seed"] = args.seed
    run_dir = _run_dir(args, cfg)
    synthetic = ds.load_synthetic(run_dir)  # raises on checksum mismatch
    train, val, test, _ = build_data(cfg)
    spec = build_model_spec(cfg, train)
    ocfg = build_outer_config(cfg)
    result = ds.evaluate(synthetic, test, spec, ocfg)
    payload = {"run_dir": run_dir, "eval": result.to_dict()}
    with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"accuracy: {result.mean:.4f} +/- {result.std:.4f}")
    return 0


def cmd_verify(args) -> int:
    report = oracle.verify_suite(level=args.level)
    for check in report["checks"]:
        tag = "PASS" if check["passed"] else "FAIL"
        extra = f" ({check['exception']})" if check["exception"] else ""
        print(f"[{tag}] {check['name']}: error={check['error']:.3e} "
              f"tol={check['tolerance']:.3e}{extra}")
    print(f"{report['level']} suite "
          f"{'ok' if report['ok'] else 'FAILED'} in {report['elapsed_s']:.2f}s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if report["ok"] else 1


BENCH_COLUMNS = ["route", "p", "k", "window", "hvps", "madds",
                 "peak_extra_floats", "wall_s"]


def _bench_route(p, k, window, seed=0):
    """Factor once and apply through a window of damped products."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((p, p))
    h = m @ m.T / p
    hvp_op = lambda v: h @ v

    counter = HvpCounter()
    t0 = time.perf_counter()
    factors = lr.factorize(hvp_op, p, k, rng, counter=counter)
    vec = rng.standard_normal(p)
    for _ in range(window):
        vec = lr.apply_damped(factors, 0.01, vec, counter=counter)
    lrha_row = {
        "route": "lrha", "p": p, "k": k, "window": window,
        "hvps": counter.count, "madds": counter.madds,
        "peak_extra_floats": counter.peak_extra_floats,
        "wall_s": time.perf_counter() - t0,
    }

    t0 = time.perf_counter()
    vec = rng.standard_normal(p)
    dense_madds = 0
    for _ in range(window):
        vec = vec - 0.01 * (h @ vec)
        dense_madds += p * p + p
    dense_row = {
        "route": "dense", "p": p, "k": k, "window": window,
        "hvps": window, "madds": dense_madds,
        "peak_extra_floats": p * p,
        "wall_s": time.perf_counter() - t0,
    }

    ratio_row = {
        "route": "ratio", "p": p, "k": k, "window": window,
        "hvps": lrha_row["hvps"] / dense_row["hvps"],
        "madds": lrha_row["madds"] / dense_row["madds"],
        "peak_extra_floats": lrha_row["peak_extra_floats"] / dense_row["peak_extra_floats"],
        "wall_s": lrha_row["wall_s"] / max(dense_row["wall_s"], 1e-12),
    }
    return [lrha_row, dense_row, ratio_row]


def cmd_bench(args) -> int:
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for p in (200, 1000):
        rows.extend(_bench_route(p, k=32, window=20))
    path = os.path.join(out_dir, "bench.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(BENCH_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(
                format(row[c], ".17g") if isinstance(row[c], float) else str(row[c])
                for c in BENCH_COLUMNS
            ) + "\n")
    for row in rows:
        if row["route"] == "ratio":
            print(f"p={row['p']} k={row['k']}: madds ratio {row['madds']:.4f}, "
                  f"memory ratio {row['peak_extra_floats']:.4f}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrolldd",
        description="dataset distillation through unrolled inner training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_distill = sub.add_parser("distill", help="run an outer optimization")
    p_distill.add_argument("--config", required=True)
    p_distill.add_argument("--out", default=None, help="run directory")
    p_distill.add_argument("--seed", type=int, default=None,
                           help="override [run] master_seed")
    p_distill.set_defaults(fn=cmd_distill)

    p_eval = sub.add_parser("eval", help="retrain on a saved synthetic set")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", default=None, help="run directory to read")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the oracle cross-checks")
    p_verify.add_argument("--level", choices=("fast", "full"), default="fast")
    p_verify.add_argument("--out", default=None, help="where to write verify.json")
    p_verify.set_defaults(fn=cmd_verify)

    p_bench = sub.add_parser("bench", help="cost model for Hessian products")
    p_bench.add_argument("--out", default=None, help="where to write bench.csv")
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
