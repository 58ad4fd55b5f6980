"""Configuration, run orchestration and file export.

Configurations are flat JSON or TOML tables.  Keys are the :class:`Params`
fields plus the run controls in ``RUN_KEYS``; anything else is rejected so a
mistyped key cannot silently fall back to a default.

Command line::

    fingerwave solve --config run.toml --out results/ --set c=0.0625
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import continuation as cont
from . import diagnostics as diag
from . import grid_fem as fem
from .tw_scheme import (Discretization, Params, ParamsError, Solution, energy_directional_check,
                        fixed_point_solve, ode_transport, saturation_step, strong_residual,
                        variational_pressure_solve)

log = logging.getLogger("fingerwave")

MODES = ("solve", "sweep", "find-speed", "classify", "oracle-check")
FORMATS = ("csv", "vtk")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

_PARAM_TYPES = {f.name: f.type for f in fields(Params) if f.name != "laws"}
RUN_KEYS = {
    "mode": str,
    "c_values": list,
    "bracket": list,
    "tol_c": float,
    "warm_start": bool,
    "refine_tol": float,
    "out_dir": str,
    "formats": list,
    "dz_threshold": float,
    "margin": int,
}


class ConfigError(ValueError):
    """Malformed, incomplete or unknown configuration entries."""


@dataclass
class RunConfig:
    params: Params
    mode: str
    c_values: list[float] | None = None
    bracket: tuple[float, float] | None = None
    tol_c: float = 1e-4
    warm_start: bool = False
    refine_tol: float | None = None
    out_dir: str = "fingerwave-out"
    formats: list[str] = field(default_factory=lambda: ["csv"])
    dz_threshold: float | None = None
    margin: int = 2

    def effective(self) -> dict:
        """Complete configuration as a flat table that :func:`parse_config` accepts."""
        out: dict[str, Any] = dict(self.params.to_dict())
        out.update(mode=self.mode, tol_c=self.tol_c, warm_start=self.warm_start,
                   out_dir=self.out_dir, formats=list(self.formats), margin=self.margin)
        if self.c_values is not None:
            out["c_values"] = list(self.c_values)
        if self.bracket is not None:
            out["bracket"] = list(self.bracket)
        if self.refine_tol is not None:
            out["refine_tol"] = self.refine_tol
        if self.dz_threshold is not None:
            out["dz_threshold"] = self.dz_threshold
        if out.get("y_c") is None:
            out.pop("y_c", None)
        return out


def _to_float(key: str, value) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as a number") from None
    raise ConfigError(f"{key}: expected a number, got {type(value).__name__}")


def _to_int(key: str, value) -> int:
    v = _to_float(key, value)
    if v != int(v):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return int(v)


def _coerce(key: str, kind, value):
    kind = kind if isinstance(kind, type) else str(kind)
    if kind in (float, "float") or kind == "float | None":
        return _to_float(key, value)
    if kind in (int, "int"):
        return _to_int(key, value)
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported type {kind}")


def _load_text(text: str, fmt: str | None) -> dict:
    if fmt is None:
        fmt = "json" if text.lstrip().startswith("{") else "toml"
    try:
        data = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {fmt} configuration: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table of key/value pairs")
    return data


def parse_config(text: str | dict, fmt: str | None = None,
                 overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a fully defaulted :class:`RunConfig` from JSON or TOML text.

    ``fmt`` is ``"json"``, ``"toml"`` or ``None`` (guess from the first
    character).  ``overrides`` are applied on top, after parsing.
    """
    data = dict(text) if isinstance(text, dict) else _load_text(text, fmt)
    if overrides:
        data.update(overrides)
    unknown = sorted(set(data) - set(_PARAM_TYPES) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    if "mode" not in data:
        raise ConfigError("missing required key: mode")
    mode = _coerce("mode", str, data["mode"])
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    kw = {}
    for key, kind in _PARAM_TYPES.items():
        if key in data and data[key] is not None:
            kw[key] = _coerce(key, kind, data[key])
    try:
        params = Params(**kw)
    except (ParamsError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    cfg = RunConfig(params=params, mode=mode)
    if "c_values" in data:
        cfg.c_values = [_to_float("c_values", v) for v in _coerce("c_values", list, data["c_values"])]
    if "bracket" in data:
        br = [_to_float("bracket", v) for v in _coerce("bracket", list, data["bracket"])]
        if len(br) != 2:
            raise ConfigError("bracket must have exactly two entries")
        cfg.bracket = (br[0], br[1])
    for key in ("tol_c", "refine_tol", "dz_threshold"):
        if key in data:
            setattr(cfg, key, _to_float(key, data[key]))
    if "warm_start" in data:
        cfg.warm_start = _coerce("warm_start", bool, data["warm_start"])
    if "margin" in data:
        cfg.margin = _to_int("margin", data["margin"])
    if "out_dir" in data:
        cfg.out_dir = _coerce("out_dir", str, data["out_dir"])
    if "formats" in data:
        cfg.formats = [str(f) for f in _coerce("formats", list, data["formats"])]
        bad = [f for f in cfg.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unsupported export formats: {bad}")

    if mode == "sweep" and not cfg.c_values:
        raise ConfigError("mode sweep needs c_values")
    if mode == "find-speed" and cfg.bracket is None:
        raise ConfigError("mode find-speed needs bracket")
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# ---------------------------------------------------------------------------
# export


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def export_field(values, grid: fem.Grid, path: str | os.PathLike, fmt: str = "csv",
                 name: str = "value") -> Path:
    """Write a nodal field as CSV (``y,z,value``) or legacy ASCII VTK.

    Nodes appear in row-major order (``y`` fastest).  Numbers carry 17
    significant digits so the files reload exactly and are byte-stable.
    """
    values = grid.check_field(values, name)
    path = Path(path)
    if fmt == "csv":
        lines = ["y,z,value"]
        lines += [f"{_fmt(y)},{_fmt(z)},{_fmt(v)}" for (y, z), v in zip(grid.nodes, values)]
    elif fmt == "vtk":
        n = grid.n_nodes
        lines = ["# vtk DataFile Version 3.0", f"fingerwave {name}", "ASCII",
                 "DATASET STRUCTURED_GRID", f"DIMENSIONS {grid.nx + 1} {grid.nz + 1} 1",
                 f"POINTS {n} double"]
        lines += [f"{_fmt(y)} {_fmt(z)} 0" for y, z in grid.nodes]
        lines += [f"POINT_DATA {n}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(v) for v in values]
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_vtk(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Read back a file written by :func:`export_field` with ``fmt="vtk"``.

    Returns ``(points (n, 3), scalars (n,), (nx + 1, nz + 1))``.
    """
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or not lines[0].startswith("# vtk DataFile Version"):
        raise ValueError("not a legacy VTK file")
    if lines[2].strip() != "ASCII" or lines[3].strip() != "DATASET STRUCTURED_GRID":
        raise ValueError("only ASCII STRUCTURED_GRID files are supported")
    dims = tuple(int(v) for v in lines[4].split()[1:3])
    n = int(lines[5].split()[1])
    pts = np.array([[float(t) for t in ln.split()] for ln in lines[6:6 + n]])
    i = 6 + n
    if not lines[i].startswith("POINT_DATA") or int(lines[i].split()[1]) != n:
        raise ValueError("missing POINT_DATA block")
    vals = np.array([float(t) for t in lines[i + 3:i + 3 + n]])
    return pts, vals, dims


def read_csv_field(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["y", "z", "value"]:
        raise ValueError("unexpected CSV header")
    return np.array([[float(v) for v in r] for r in rows[1:]])


def _write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue(), encoding="ascii")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n", encoding="ascii")


_RECORD_COLUMNS = ("c", "converged", "iters", "G1", "G2", "G", "label", "h", "h_index",
                   "p_star", "max_s", "error")


def _record_row(r: cont.SweepRecord) -> list:
    d = r.to_dict()
    return [d[k] if d[k] is not None else "" for k in _RECORD_COLUMNS]


def _records(records) -> list[dict]:
    return [{k: r.to_dict()[k] for k in _RECORD_COLUMNS} for r in records]


# ---------------------------------------------------------------------------
# orchestration


def solution_diagnostics(sol: Solution, cfg: RunConfig) -> dict:
    params = sol.params
    det = cont.classify_details(sol, params, cfg.dz_threshold, cfg.margin)
    fp = diag.flux_profile(sol, params)
    r_pde, r_hys = strong_residual(sol, params)
    out = {
        "c": params.c,
        "converged": sol.converged,
        "iters": sol.iters,
        "newton_steps": sol.newton_steps,
        "last_update": sol.residual_history[-1] if sol.residual_history else None,
        "p_star": sol.p_star,
        "max_s": float(np.max(sol.s)),
        "clamped_nodes": sol.clamp.total,
        "type": det["label"],
        "G1": cont.eval_G1(sol, params),
        "G": cont.eval_G_general(sol, params),
        "G2": det["G2"],
        "h": det["h"],
        "h_index": det["h_index"],
        "flux_mean": fp.mean,
        "flux_relative_deviation": fp.relative_deviation,
        "r_pde": r_pde,
        "r_hys": r_hys,
        "g_F_infinite_domain_estimate": diag.g_F(sol, params),
    }
    try:
        out["c_mass_balance_infinite_domain_estimate"] = diag.c_mass_balance(sol, params)
    except diag.UndefinedResultError:
        out["c_mass_balance_infinite_domain_estimate"] = None
    out["lipschitz"] = diag.lipschitz_check(sol, params).to_dict()
    out["bounds"] = diag.bound_diagnostics(sol, params)
    return out


def _export_solution(sol: Solution, cfg: RunConfig, out: Path, prefix: str = "") -> list[str]:
    written = []
    grid = sol.grid
    src = cont.hysteresis_source(sol, sol.params) * sol.params.c * sol.params.tau
    for name, vals in (("s", sol.s), ("p", sol.p), ("source", src)):
        for fmt in cfg.formats:
            path = out / f"{prefix}{name}.{fmt}"
            export_field(vals, grid, path, fmt, name=name)
            written.append(path.name)
    psi = diag.free_boundary(sol, sol.params)
    ys = grid.as_rows(grid.y)[0]
    _write_table(out / f"{prefix}psi.csv", ["y", "psi"], list(zip(ys.tolist(), psi.tolist())))
    written.append(f"{prefix}psi.csv")
    return written


def _run_solve(cfg: RunConfig, out: Path, export: bool) -> tuple[int, dict]:
    sol = fixed_point_solve(cfg.params)
    d = solution_diagnostics(sol, cfg)
    report = {"result": d}
    if export:
        report["files"] = _export_solution(sol, cfg, out)
        flat = [(k, v) for k, v in d.items() if not isinstance(v, dict)]
        _write_table(out / "diagnostics.csv", ["quantity", "value"], flat)
        report["files"].append("diagnostics.csv")
    return (EXIT_OK if sol.converged else EXIT_NOT_CONVERGED), report


def _run_sweep(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    keep = cfg.warm_start and cfg.refine_tol is not None
    res = cont.sweep_c(cfg.params, cfg.c_values, warm_start=cfg.warm_start, keep_solutions=keep,
                       callback=lambda r: log.info("c=%r %s G1=%.6g G2=%.6g", r.c, r.label, r.G1, r.G2))
    records = list(res.records)
    report: dict[str, Any] = {"transition": res.transition()}
    if cfg.refine_tol is not None and res.transition() is not None:
        lo, hi = res.transition()
        start = None
        if cfg.warm_start:
            last = res.solutions[[r.c for r in res.records].index(lo)]
            start = (last.p, last.s)
        bracket, refined = cont.locate_transition(cfg.params, lo, hi, cfg.refine_tol,
                                                  warm_start=cfg.warm_start, init=start)
        report["refined_transition"] = list(bracket)
        records += refined
    report["records"] = _records(records)
    _write_table(out / "sweep.csv", list(_RECORD_COLUMNS), [_record_row(r) for r in records])
    ok = all(r.converged for r in res.records)
    return (EXIT_OK if ok else EXIT_NOT_CONVERGED), report


def _run_find_speed(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    lo, hi = cfg.bracket
    res = cont.find_wave_speed(cfg.params, (lo, hi), cfg.tol_c)
    _write_table(out / "find_speed.csv", list(_RECORD_COLUMNS), [_record_row(r) for r in res.records])
    report = {"c_bar": res.c_bar, "bracket": list(res.bracket), "G1_bracket": list(res.G1_bracket),
              "records": _records(res.records)}
    return EXIT_OK, report


def _run_oracle(cfg: RunConfig, out: Path) -> tuple[int, dict]:
    params = cfg.params
    disc = Discretization(params)
    sol = fixed_point_solve(params, disc=disc)
    s_ode = ode_transport(sol.p, params, sol.grid)
    gaps = {}
    for eps in (params.epsilon, params.epsilon / 4.0):
        s_eps = saturation_step(sol.s, sol.p, params.replace(epsilon=eps))
        gaps[repr(eps)] = float(np.max(np.abs(s_eps - s_ode)))
    var = variational_pressure_solve(sol.s, params, disc=disc)
    report = {
        "converged": sol.converged,
        "saturation_vs_ode_sup": gaps,
        "variational_iterations": var.iterations,
        "variational_converged": var.converged,
        "variational_energy_monotone": var.monotone,
        "variational_vs_scheme_pressure_sup": float(np.max(np.abs(var.p - sol.p))),
        "energy_fd_relative_derivative": energy_directional_check(var.p, sol.s, params, disc=disc),
    }
    code = EXIT_OK if (sol.converged and var.converged) else EXIT_NOT_CONVERGED
    return code, report


def run(cfg: RunConfig) -> tuple[int, dict]:
    """Execute one configured run, write its outputs and return ``(exit code, summary)``.

    ``summary.json`` in the output directory embeds the effective
    configuration; feeding that table back to :func:`parse_config`
    reproduces every output file byte for byte.
    """
    out = Path(cfg.out_dir)
    summary: dict[str, Any] = {"config": cfg.effective(), "mode": cfg.mode}
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary["warnings"] = cfg.params.warnings()
        if cfg.mode in ("solve", "classify"):
            code, rep = _run_solve(cfg, out, export=cfg.mode == "solve")
        elif cfg.mode == "sweep":
            code, rep = _run_sweep(cfg, out)
        elif cfg.mode == "find-speed":
            code, rep = _run_find_speed(cfg, out)
        else:
            code, rep = _run_oracle(cfg, out)
        summary.update(rep)
    except Exception as exc:
        log.error("%s run failed: %s", cfg.mode, exc)
        summary["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_ERROR
    summary["exit_code"] = code
    if cfg.mode == "classify" and "result" in summary:
        summary["type"] = summary["result"]["type"]
    try:
        _write_json(out / "summary.json", summary)
    except OSError as exc:
        log.error("cannot write summary: %s", exc)
        return EXIT_ERROR, summary
    return code, summary


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="fingerwave", description="Travelling-wave finger solver")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", help="JSON or TOML configuration file")
    ap.add_argument("--out", help="output directory (overrides out_dir)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override one configuration entry; may be repeated")
    args = ap.parse_args(argv)

    level = os.environ.get("FINGERWAVE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        data: dict[str, Any] = {}
        if args.config:
            text = Path(args.config).read_text()
            fmt = "json" if args.config.endswith(".json") else None
            data = _load_text(text, fmt)
        if "mode" in data and data["mode"] != args.mode:
            raise ConfigError(f"config says mode={data['mode']!r} but {args.mode!r} was requested")
        data["mode"] = args.mode
        for item in args.overrides:
            k, v = parse_override(item)
            data[k] = v
        if args.out:
            data["out_dir"] = args.out
        cfg = parse_config(data)
    except (ConfigError, OSError) as exc:
        print(f"fingerwave: {exc}", file=sys.stderr)
        return EXIT_ERROR
    code, summary = run(cfg)
    brief = {k: summary[k] for k in ("mode", "exit_code", "type", "transition", "c_bar", "bracket",
                                     "refined_transition", "error") if k in summary}
    print(json.dumps(_clean(brief), sort_keys=True))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
