"""Command-line front end: ``cocsim <command> --config FILE [--out DIR]``.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
config error.  All JSON output is written with sorted keys and no
timestamps, so reruns of the same config are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, meanfield
from .ccdf import Ccdf, Grid
from .distributions import mix_from_dict, marginal_hazard
from .simulator import BracketError, Frame, SimConfig, estimate_critical_lambda_n, run_simulation


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_schema(name: str = "config.schema.json") -> dict:
    return json.loads(resources.files("cocsim").joinpath("schemas", name).read_text())


def _fill_defaults(instance, schema: dict, root: dict):
    if "$ref" in schema:
        schema = root["$defs"][schema["$ref"].rsplit("/", 1)[-1]]
    if isinstance(instance, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in instance and "default" in sub:
                instance[key] = copy.deepcopy(sub["default"])
            if key in instance:
                _fill_defaults(instance[key], sub, root)
    elif isinstance(instance, list) and isinstance(schema.get("items"), dict):
        for item in instance:
            _fill_defaults(item, schema["items"], root)


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    return ".".join(parts) or "<root>"


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"{path}: config error at {_error_path(err)}: {err.message}")
    _fill_defaults(cfg, schema, schema)
    try:
        cfg["_mix"] = mix_from_dict(cfg["mix"])
    except KeyError as exc:
        raise ConfigError(f"{path}: invalid mix: missing size-law parameter {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid mix: {exc}") from None
    return cfg


def build_grid(cfg: dict, target_rho: float = 0.5) -> Grid:
    mix = cfg["_mix"]
    g = meanfield.default_grid(mix, target_rho, cfg["grid"].get("step"))
    wmax = cfg["grid"].get("max", g.wmax)
    return Grid(g.step, wmax)


def build_sim_config(cfg: dict) -> SimConfig:
    sim = cfg["sim"]
    kind = sim["frame"]
    if kind == "truncated":
        if "cap" not in sim:
            raise ConfigError("config error at sim.cap: a truncated frame needs a cap")
        frame = Frame.truncated(sim["cap"])
    else:
        frame = Frame(kind)
    grid = cfg["grid"]
    kwargs = {}
    if "step" in grid:
        kwargs["ccdf_step"] = grid["step"]
    if "max" in grid:
        kwargs["ccdf_max"] = grid["max"]
    try:
        return SimConfig(n=sim["n"], mix=cfg["_mix"], horizon=sim["horizon"], frame=frame,
                         warmup=sim.get("warmup"), sample_interval=sim["sample_interval"],
                         tagged=min(sim["tagged"], sim["n"]), seed=sim["seed"], **kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid sim section: {exc}") from None


# ---------------------------------------------------------------------------
# output helpers


def write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(args, cfg=None) -> Path:
    out = Path(args.out or (cfg["output"]["directory"] if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_seed(cfg: dict, seed) -> None:
    if seed is not None:
        cfg["sim"]["seed"] = seed


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    _apply_seed(cfg, args.seed)
    out = _out_dir(args, cfg)
    met = run_simulation(build_sim_config(cfg))
    write_json(out / "metrics.json", met.to_dict())
    met.empirical_ccdf.to_csv(out / "ccdf.csv")
    m = met.tagged_samples.shape[1]
    rows = ([e, *s] for e, s in zip(met.tagged_epochs, met.tagged_samples))
    write_rows(out / "tagged.csv", ["epoch"] + [f"W_{i + 1}" for i in range(m)], rows)
    return 0


def _solve(cfg: dict, lam: float, frame):
    mix = cfg["_mix"]
    solver = cfg["solver"]
    if frame == "infinite":
        guess = min(lam * mix.mean_degree * mix.mean_size, 0.95)
        grid = build_grid(cfg, guess)
        if solver["h_mode"] == "monte_carlo":
            raise ConfigError("config error at solver.h_mode: the shooting solver uses the closed-form h")
        return meanfield.solve_fp_infinite(lam, mix, grid, solver["tol"], solver["eps_tail"])
    c = float(frame)
    grid = build_grid(cfg)
    if grid.wmax < c:
        grid = Grid(grid.step, 1.25 * c)
    return meanfield.solve_fp_finite_frame(c, lam, mix, grid, solver["tol"])


def cmd_solve_fp(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    frame = args.frame if args.frame is not None else cfg["solver"]["frame"]
    if frame != "infinite":
        try:
            frame = float(frame)
        except ValueError:
            raise ConfigError(f"--frame must be 'infinite' or a number, got {frame!r}") from None
    lam = cfg["_mix"].lam
    res = _solve(cfg, lam, frame)
    if isinstance(res, meanfield.Supercritical):
        write_json(out / "fp.json", res.header())
        return 0
    res.x.to_csv(out / "fp.csv")
    write_json(out / "fp.json", res.header())
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    try:
        lambdas = [float(v) for v in args.lambda_list.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--lambda-list must be comma-separated numbers, got {args.lambda_list!r}") from None
    if not lambdas:
        raise ConfigError("--lambda-list is empty")
    rows, ok = [], 0
    for lam in lambdas:
        try:
            res = _solve(cfg, lam, "infinite")
        except meanfield.AmbiguousClassification as exc:
            rows.append([lam, "", f"error: {exc}"])
            continue
        if isinstance(res, meanfield.Supercritical):
            rows.append([lam, "", "supercritical"])
        else:
            rows.append([lam, res.rho, "infinite"])
        ok += 1
    write_rows(out / "rho_curve.csv", ["lambda", "rho", "frame_or_supercritical"], rows)
    return 0 if ok else 1


def _read_metrics(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
        step = float(data["ccdf_step"])
        values = [float(v) for v in data["empirical_ccdf"]]
        load = float(data["load"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: cannot parse metrics ({exc})") from None
    return {"ccdf": Ccdf(step, values), "load": load}


def _read_fp(path) -> dict:
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path) as fh:
                header = json.load(fh)
            if header.get("verdict") == "supercritical":
                raise ConfigError(f"{path}: fixed point is supercritical; nothing to compare")
            x = Ccdf.from_csv(path.with_suffix(".csv"))
            rho = float(header["rho"])
        else:
            x = Ccdf.from_csv(path)
            rho = float(x.values[0])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: cannot parse fixed point ({exc})") from None
    return {"x": x, "rho": rho}


class _View:
    def __init__(self, **kw):
        self.__dict__.update(kw)


def cmd_compare(args) -> int:
    budgets = {"levy_budget": 0.02, "load_budget": 0.01, "correlation_budget": 0.05}
    if args.config:
        budgets.update(load_config(args.config)["compare"])
    sim = _read_metrics(args.metrics)
    fp = _read_fp(args.fp)
    report = analysis.compare_sim_to_fp(_View(empirical_ccdf=sim["ccdf"], load=sim["load"]),
                                        _View(x=fp["x"], rho=fp["rho"]))
    checks = {
        "levy": report["levy"] <= budgets["levy_budget"],
        "load": report["load_discrepancy"] <= budgets["load_budget"],
    }
    if args.tagged:
        try:
            data = np.loadtxt(args.tagged, delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{args.tagged}: cannot parse tagged samples ({exc})") from None
        if data.shape[1] >= 3:
            ind = analysis.independence_report(data[:, 1:])
            report["independence"] = ind.to_dict()
            checks["correlation"] = ind.max_abs_correlation <= budgets["correlation_budget"]
    report["budgets"] = budgets
    report["checks"] = checks
    report["pass"] = all(checks.values())
    write_json(_out_dir(args) / "report.json", report)
    return 0 if report["pass"] else 1


def cmd_critical(args) -> int:
    cfg = load_config(args.config)
    _apply_seed(cfg, args.seed)
    out = _out_dir(args, cfg)
    crit = cfg["critical"]
    mode = args.mode or crit["mode"]
    mix = cfg["_mix"]
    if mode == "mf":
        grid = build_grid(cfg) if cfg["grid"] else None
        res = meanfield.estimate_lambda_bar(mix, grid, tol=crit["tolerance"]).to_dict()
    else:
        sim = cfg["sim"]
        try:
            res = estimate_critical_lambda_n(sim["n"], mix, crit["method"], crit["tolerance"], sim["seed"],
                                             tuple(crit["lambda_range"]), sim["horizon"], sim.get("warmup"),
                                             sim["sample_interval"]).to_dict()
        except BracketError as exc:
            print(f"critical: {exc}", file=sys.stderr)
            return 1
    res["mode"] = mode
    write_json(out / "lambda_bar.json", res)
    return 0


def _default_chain(d: int, scale: float) -> list:
    return [[0.0] + [t * scale] * (d - 1) for t in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)]


def cmd_dmono(args) -> int:
    cfg = load_config(args.config)
    _apply_seed(cfg, args.seed)
    out = _out_dir(args, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["sim"]["seed"]))
    spec = cfg["dmono"]
    rows = []
    for cls in cfg["_mix"].classes:
        chains = [c for c in spec.get("chains", []) if len(c[0]) == cls.d]
        chains = chains or [_default_chain(cls.d, cls.mean_size)]
        try:
            v = analysis.dmono_scan(cls, chains, spec["samples"], rng)
        except ValueError as exc:
            raise ConfigError(f"config error at dmono.chains: {exc}") from None
        w = v.witness
        step = w.get("increase", w) if v.direction == "violated" else w
        rows.append([cls.name, cls.d, cls.k, marginal_hazard(cls.sizes).value, v.direction,
                     json.dumps(step.get("from")), json.dumps(step.get("to")),
                     float(step.get("diff", 0.0)), float(step.get("stderr", 0.0)),
                     float(v.sup_estimate["mean"])])
    write_rows(out / "dmono.csv", ["class", "d", "k", "hazard", "direction", "witness_from", "witness_to",
                                   "witness_diff", "witness_stderr", "sup_mean"], rows)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cocsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, config=True):
        p = sub.add_parser(name)
        if config:
            p.add_argument("--config", required=True)
            p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=func)
        return p

    add("simulate", cmd_simulate)
    add("solve-fp", cmd_solve_fp).add_argument("--frame")
    add("sweep", cmd_sweep).add_argument("--lambda-list", required=True)
    cmp = add("compare", cmd_compare, config=False)
    cmp.add_argument("--metrics", required=True)
    cmp.add_argument("--fp", required=True)
    cmp.add_argument("--tagged")
    cmp.add_argument("--config")
    add("critical", cmd_critical).add_argument("--mode", choices=["mf", "fixed_n"])
    add("dmono", cmd_dmono)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cocsim {args.command}: {exc}", file=sys.stderr)
        return 2
    except meanfield.AmbiguousClassification as exc:
        print(f"cocsim {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of a command
        print(f"cocsim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
