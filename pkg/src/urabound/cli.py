"""Command-line front end.

Config files are flat ``key = value`` text (``#`` starts a comment)::

    ka = 100
    n = 30000
    k = 100
    ebn0_db = 3.0          # or: p = 0.0133
    p_prime_ratio = 0.9
    eps_target = 0.001
    seed = 0
    variants.kernel = printed
    variants.q2 = product

Command-line flags override file values.  Every command writes a run
manifest (``<output>.manifest.json``) that ``urabound replay`` re-executes
and checks byte for byte.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  Errors
print one line ``urabound: error=<kind> command=<cmd> detail=<json string>``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bound import (
    DEFAULT_RATIOS,
    BoundOptions,
    BracketError,
    EstimatorPool,
    epsilon_bound,
    required_ebn0,
)
from .constants import DEFAULT_POWER_ITERS, DenoiserConstants, estimate_constants
from .diffusion import (
    ScoreModel,
    TrainHyper,
    TrainingError,
    analytic_model,
    matched_schedule,
    train_score,
    training_samples,
    zero_model,
)
from .sysmodel import ConfigError, SystemConfig, ebn0_db_to_power

THREADS_ENV = "URABOUND_THREADS"
CURVE_VARIANTS = ("theorem1", "theorem1_v1", "theorem1_rederived", "baseline", "q2only")
CSV_COLUMNS = ("ka", "ebn0_db", "eps_total", "q0", "best_p_prime", "v_star", "variant", "status")

DEFAULTS = {
    "ka": None,
    "n": None,
    "k": None,
    "p": None,
    "ebn0_db": None,
    "p_prime_ratio": 0.9,
    "eps_target": 1e-3,
    "seed": 0,
    "mc_samples": 10_000,
    "subset_budget": 100_000,
    "p_prime_grid": ",".join(str(r) for r in DEFAULT_RATIOS),
    "lo_db": -2.0,
    "hi_db": 20.0,
    "tol_db": 0.01,
    "ka_list": None,
    "ebn0_grid": None,
    "variants.kernel": "printed",
    "variants.q2": "product",
    "variants.idens": "literal",
    "variants.ke": "sqrt",
    "variants.reference": "auto",
}
_INT_KEYS = {"ka", "n", "k", "seed", "mc_samples", "subset_budget"}
_FLOAT_KEYS = {"p", "ebn0_db", "p_prime_ratio", "eps_target", "lo_db", "hi_db", "tol_db"}


class CliError(Exception):
    def __init__(self, kind: str, detail: str, code: int):
        super().__init__(detail)
        self.kind, self.detail, self.code = kind, detail, code


def config_error(detail: str) -> CliError:
    return CliError("config", detail, 2)


# -- config ------------------------------------------------------------------


def read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise config_error(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise config_error(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise config_error(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise config_error(f"bad value for {key}: {value!r}") from None
    return str(value)


def resolve(file_values: dict, overrides: dict) -> dict:
    merged = dict(DEFAULTS)
    merged.update(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return {k: _coerce(k, v) for k, v in merged.items()}


def _float_list(text, key):
    if text is None:
        raise config_error(f"{key} is required")
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise config_error(f"bad list for {key}: {text!r}") from None
    if not values:
        raise config_error(f"{key} is empty")
    return values


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise config_error("missing config keys: " + ", ".join(missing))


def system_config(cfg: dict) -> SystemConfig:
    _need(cfg, "ka", "n", "k")
    if cfg["p"] is None and cfg["ebn0_db"] is None:
        raise config_error("need p or ebn0_db")
    p = cfg["p"] if cfg["p"] is not None else ebn0_db_to_power(cfg["ebn0_db"], cfg["n"], cfg["k"])
    try:
        return SystemConfig(
            ka=cfg["ka"], n=cfg["n"], k=cfg["k"], p=p, p_prime=cfg["p_prime_ratio"] * p, eps_target=cfg["eps_target"]
        )
    except ConfigError as exc:
        raise config_error(str(exc)) from None


def bound_options(cfg: dict) -> BoundOptions:
    try:
        return BoundOptions(
            kernel=cfg["variants.kernel"],
            q2_variant=cfg["variants.q2"],
            idens=cfg["variants.idens"],
            mc_samples=cfg["mc_samples"],
            seed=cfg["seed"],
            subset_budget=cfg["subset_budget"],
        )
    except ValueError as exc:
        raise config_error(str(exc)) from None


def load_constants(path: str | None) -> DenoiserConstants:
    if path is None:
        return DenoiserConstants.ideal()
    try:
        return DenoiserConstants.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise config_error(f"cannot load constants {path}: {exc}") from None


def load_checkpoint(path: str) -> ScoreModel:
    try:
        return ScoreModel.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise config_error(f"cannot load checkpoint {path}: {exc}") from None


# -- output helpers ------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -------------------------------------------------------------------
#
# Each command takes the resolved parameter dict and an output path and
# returns {output path: text}.  Writing and manifests are handled centrally
# so replays can redirect outputs.


def cmd_train(params: dict, out: Path) -> dict:
    config = system_config(params)
    kind = params["model"]
    if kind in ("linear", "mlp"):
        if params["samples"] < 2:
            raise config_error("--samples must be >= 2")
        sched = matched_schedule(config.ka * config.p_prime, T=params["T"])
        ys, scale = training_samples(config, params["samples"], params["seed"])
        hyper = TrainHyper(
            epochs=params["epochs"], lr=params["lr"], batch=params["batch"], seed=params["seed"], hidden=params["hidden"]
        )
        model, report = train_score(kind, ys, sched, hyper=hyper, data_scale=scale)
        report_doc = report.to_dict()
    elif kind == "analytic":
        model = analytic_model(config.output_variance, config.n)
        report_doc = {"note": "closed-form score, not trained"}
    elif kind == "zero":
        model = zero_model(config.n)
        report_doc = {"note": "zero score, not trained"}
    else:
        raise config_error(f"unknown model kind {kind!r}")
    report_doc["model_checksum"] = model.checksum()
    return {out: model.to_json() + "\n", _sibling(out, ".report.json"): dump_json(report_doc)}


def cmd_constants(params: dict, out: Path) -> dict:
    config = system_config(params)
    model = load_checkpoint(params["checkpoint"])
    if model.n != config.n:
        raise config_error(f"checkpoint dimension {model.n} does not match config n={config.n}")
    if params["n_samples"] < 2:
        raise config_error("--n-samples must be >= 2")
    consts = estimate_constants(
        model,
        config,
        N=params["n_samples"],
        iters=params["iters"],
        seed=params["seed"],
        reference=params["variants.reference"],
        convention=params["variants.ke"],
        dims=params["dims"],
    )
    doc = consts.to_dict()
    doc["dims"] = params["dims"] if params["dims"] is not None else config.n
    return {out: dump_json(doc)}


def _variant_setup(name: str, options: BoundOptions, consts: DenoiserConstants):
    if name == "theorem1":
        return consts.v_star, options
    if name == "theorem1_v1":
        return 1.0, options
    if name == "theorem1_rederived":
        return consts.v_star, replace(options, kernel="rederived")
    if name == "baseline":
        return 1.0, replace(options, kernel="baseline")
    if name == "q2only":
        return 1.0, replace(options, use_q1=False)
    raise config_error(f"unknown curve variant {name!r}")


def _curve_ka_rows(job):
    ka, params, consts_doc = job
    consts = DenoiserConstants.from_dict(consts_doc)
    options = bound_options(params)
    ratios = _float_list(params["p_prime_grid"], "p_prime_grid")
    pool = options.pool()
    rows = []
    for name in params["variants"]:
        v, opts = _variant_setup(name, options, consts)
        row = {"ka": ka, "variant": name, "v_star": v}
        try:
            db, witness = required_ebn0(
                ka,
                params["n"],
                params["k"],
                params["eps_target"],
                v,
                opts,
                lo_db=params["lo_db"],
                hi_db=params["hi_db"],
                tol_db=params["tol_db"],
                ratios=ratios,
                pool=pool,
                label=name,
            )
            row.update(
                ebn0_db=db,
                eps_total=witness.eps_total,
                q0=witness.q0,
                best_p_prime=witness.config.p_prime,
                status="ok",
            )
        except BracketError as exc:
            row.update(ebn0_db=math.nan, eps_total=exc.eps_hi, status="bracket_failure")
        rows.append(row)
    return rows


def _map_jobs(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def cmd_curve_ka(params: dict, out: Path) -> dict:
    _need(params, "n", "k")
    kas = [int(v) for v in _float_list(params["ka_list"], "ka_list")]
    if any(ka < 1 for ka in kas):
        raise config_error("every K_a must be >= 1")
    bound_options(params)
    consts = load_constants(params["constants"])
    t0 = time.perf_counter()
    jobs = [(ka, params, consts.to_dict()) for ka in kas]
    rows = [row for chunk in _map_jobs(_curve_ka_rows, jobs, params["threads"]) for row in chunk]
    wide = []
    for ka in kas:
        entry = {"ka": ka}
        for row in rows:
            if row["ka"] == ka:
                entry[row["variant"]] = row["ebn0_db"]
        wide.append(entry)
    outputs = {
        out: csv_text(rows, CSV_COLUMNS),
        _sibling(out, ".wide.csv"): csv_text(wide, ("ka",) + tuple(params["variants"])),
    }
    if params.get("timing"):
        outputs[_sibling(out, ".timing.json")] = dump_json({"runtime_ms": (time.perf_counter() - t0) * 1e3})
    return outputs


def cmd_curve_eps(params: dict, out: Path) -> dict:
    _need(params, "ka", "n", "k")
    grid = _float_list(params["ebn0_grid"], "ebn0_grid")
    ratios = _float_list(params["p_prime_grid"], "p_prime_grid")
    options = bound_options(params)
    consts = load_constants(params["constants"])
    pool = options.pool()
    n, k, ka = params["n"], params["k"], params["ka"]
    p_all = [ebn0_db_to_power(db, n, k) for db in grid]
    pool.set_range(ka, n, min(ratios) * min(p_all), max(ratios) * max(p_all))
    rows = []
    for name in params["variants"]:
        v, opts = _variant_setup(name, options, consts)
        for db, p in zip(grid, p_all):
            best = None
            for r in ratios:
                try:
                    cfg = SystemConfig(ka=ka, n=n, k=k, p=p, p_prime=r * p, eps_target=params["eps_target"])
                except ConfigError as exc:
                    raise config_error(str(exc)) from None
                b = epsilon_bound(cfg, v, opts, pool=pool, label=name)
                if best is None or b.eps_total < best.eps_total:
                    best = b
            rows.append(
                {
                    "ka": ka,
                    "ebn0_db": db,
                    "eps_total": best.eps_total,
                    "q0": best.q0,
                    "best_p_prime": best.config.p_prime,
                    "v_star": v,
                    "variant": name,
                    "status": "ok",
                }
            )
    return {out: csv_text(rows, CSV_COLUMNS)}


def cmd_eval(params: dict, out: Path) -> dict:
    config = system_config(params)
    options = bound_options(params)
    consts = load_constants(params["constants"])
    t0 = time.perf_counter()
    name = params["variant"]
    v, opts = _variant_setup(name, options, consts)
    result = epsilon_bound(config, v, opts, label=name)
    doc = result.to_dict()
    doc["constants"] = consts.to_dict()
    if params.get("timing"):
        doc["runtime_ms"] = (time.perf_counter() - t0) * 1e3
    return {out: dump_json(doc)}


COMMANDS = {
    "train": cmd_train,
    "constants": cmd_constants,
    "curve-ka": cmd_curve_ka,
    "curve-eps": cmd_curve_eps,
    "eval": cmd_eval,
}


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def manifest_path(out: Path) -> Path:
    return _sibling(out, ".manifest.json")


def _input_files(params: dict) -> dict:
    files = {}
    for key in ("checkpoint", "constants", "config"):
        if params.get(key):
            files[key] = {"path": str(Path(params[key]).resolve()), "sha256": sha256_file(params[key])}
    return files


def execute(command: str, params: dict, out: Path) -> dict:
    """Run a command, write its outputs and manifest; returns the manifest."""
    outputs = COMMANDS[command](params, out)
    for path, text in outputs.items():
        write_text(path, text)
    inputs = _input_files(params)
    resolved = {k: v for k, v in params.items() if k not in ("timing",)}
    manifest = {
        "command": command,
        "version": __version__,
        "params": resolved,
        "seeds": {"seed": params.get("seed")},
        "variants": {k: v for k, v in params.items() if k.startswith("variants")},
        "inputs": inputs,
        "outputs": {
            str(Path(path).resolve().relative_to(out.resolve().parent)): hashlib.sha256(text.encode()).hexdigest()
            for path, text in sorted(outputs.items(), key=lambda kv: str(kv[0]))
            if not str(path).endswith(".timing.json")
        },
        "primary_output": out.name,
    }
    manifest["input_checksum"] = hashlib.sha256(
        json.dumps(_jsonable({"command": command, "params": resolved, "inputs": inputs}), sort_keys=True).encode()
    ).hexdigest()
    write_text(manifest_path(out), dump_json(manifest))
    return manifest


def replay(manifest_file: str, out_dir: str | None, stream) -> bool:
    try:
        manifest = json.loads(Path(manifest_file).read_text())
        command, params = manifest["command"], dict(manifest["params"])
    except (OSError, ValueError, KeyError) as exc:
        raise config_error(f"cannot read manifest {manifest_file}: {exc}") from None
    if command not in COMMANDS:
        raise config_error(f"manifest names unknown command {command!r}")
    for key, info in manifest.get("inputs", {}).items():
        if not Path(info["path"]).exists() or sha256_file(info["path"]) != info["sha256"]:
            raise config_error(f"input {key} changed or missing: {info['path']}")
        params[key] = info["path"]
    target_dir = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="urabound-replay-"))
    params["timing"] = False
    if "variants" in params and isinstance(params["variants"], list):
        params["variants"] = tuple(params["variants"])
    new = execute(command, params, target_dir / manifest["primary_output"])
    ok = True
    for name, digest in manifest["outputs"].items():
        same = new["outputs"].get(name) == digest
        ok &= same
        print(f"{'IDENTICAL' if same else 'DIFFERENT'} {name}", file=stream)
    return ok


# -- argument parsing ---------------------------------------------------------------


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise config_error(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urabound", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"urabound {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for key in ("ka", "n", "k", "seed", "mc-samples", "subset-budget"):
            p.add_argument(f"--{key}", type=int)
        for key in ("p", "ebn0-db", "p-prime-ratio", "eps-target"):
            p.add_argument(f"--{key}", type=float)
        p.add_argument("--kernel", choices=("printed", "rederived", "baseline"))
        p.add_argument("--q2-variant", choices=("product", "theorem"))
        p.add_argument("--idens", choices=("literal", "canonical"))
        p.add_argument("--threads", type=int, default=None, help=f"worker cap (default ${THREADS_ENV} or 1)")
        p.add_argument("--timing", action="store_true", help="record wall-clock runtime (breaks byte-identity)")
        p.add_argument("--out", required=out_required, type=Path)

    p = sub.add_parser("train", help="train a score head on channel-output samples")
    common(p)
    p.add_argument("--model", choices=("linear", "mlp", "analytic", "zero"), default="linear")
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--T", type=int, default=100)

    p = sub.add_parser("constants", help="estimate J*, K_E and v* for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--iters", type=int, default=DEFAULT_POWER_ITERS)
    p.add_argument("--dims", type=int, default=None, help="estimate on the first DIMS coordinates")
    p.add_argument("--ke-convention", choices=("sqrt", "eig"))
    p.add_argument("--reference", choices=("auto", "analytic", "self"))

    p = sub.add_parser("curve-ka", help="required Eb/N0 versus K_a")
    common(p)
    p.add_argument("--constants")
    p.add_argument("--ka-list")
    p.add_argument("--target-eps", type=float)
    p.add_argument("--variants", default=",".join(CURVE_VARIANTS))

    p = sub.add_parser("curve-eps", help="eps versus Eb/N0 at fixed K_a")
    common(p)
    p.add_argument("--constants")
    p.add_argument("--ebn0-grid")
    p.add_argument("--variants", default=",".join(CURVE_VARIANTS))

    p = sub.add_parser("eval", help="single-point eps bound with full breakdown")
    common(p)
    p.add_argument("--constants")
    p.add_argument("--variant", choices=CURVE_VARIANTS, default="theorem1")

    sub.add_parser("selftest", help="run the built-in property checks")

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs byte for byte")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="where to write the replayed outputs (default: a temp dir)")
    return parser


_FLAG_KEYS = {
    "ka": "ka",
    "n": "n",
    "k": "k",
    "seed": "seed",
    "mc_samples": "mc_samples",
    "subset_budget": "subset_budget",
    "p": "p",
    "ebn0_db": "ebn0_db",
    "p_prime_ratio": "p_prime_ratio",
    "eps_target": "eps_target",
    "target_eps": "eps_target",
    "kernel": "variants.kernel",
    "q2_variant": "variants.q2",
    "idens": "variants.idens",
    "ke_convention": "variants.ke",
    "reference": "variants.reference",
    "ka_list": "ka_list",
    "ebn0_grid": "ebn0_grid",
}


def params_from_args(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise config_error(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise config_error(f"unknown key {key!r}")
        overrides[key] = value
    for attr, key in _FLAG_KEYS.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    params = resolve(read_config_file(args.config), overrides)
    params["config"] = args.config
    params["threads"] = args.threads if args.threads is not None else _default_threads()
    if params["threads"] < 1:
        raise config_error("--threads must be >= 1")
    params["timing"] = args.timing
    for name in ("model", "samples", "epochs", "lr", "batch", "hidden", "T", "checkpoint", "n_samples", "iters", "dims", "constants", "variant"):
        if hasattr(args, name):
            params[name] = getattr(args, name)
    if hasattr(args, "variants"):
        params["variants"] = tuple(v.strip() for v in args.variants.split(",") if v.strip())
        unknown = set(params["variants"]) - set(CURVE_VARIANTS)
        if unknown:
            raise config_error(f"unknown curve variants: {sorted(unknown)}")
    return params


def _fail(err: CliError, command: str) -> int:
    print(f"urabound: error={err.kind} command={command} detail={json.dumps(err.detail)}", file=sys.stderr)
    return err.code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        if command == "selftest":
            from .selftest import run

            ok = run(sys.stdout)
            if not ok:
                raise CliError("selftest", "one or more checks failed", 3)
            return 0
        if command == "replay":
            ok = replay(args.manifest, args.out_dir, sys.stdout)
            if not ok:
                raise CliError("replay_mismatch", "replayed outputs differ from the manifest", 3)
            return 0
        params = params_from_args(args)
        execute(command, params, args.out)
        return 0
    except CliError as err:
        return _fail(err, command)
    except (TrainingError, BracketError, ArithmeticError, FloatingPointError) as exc:
        return _fail(CliError("numerical", str(exc), 3), command)
    except (ConfigError, ValueError) as exc:
        return _fail(CliError("config", str(exc), 2), command)


if __name__ == "__main__":
    sys.exit(main())
