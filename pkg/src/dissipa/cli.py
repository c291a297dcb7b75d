"""Command-line front end.

Subcommands::

    dissipa analyze --config conic1d --out runs/conic
    dissipa verify  --config conic1d --result runs/conic/result.json
    dissipa mesh    --config pendulum --out runs/mesh
    dissipa sweep   --config pendulum --out runs/pendulum
    dissipa report  runs/conic/result.json

``--config`` takes a TOML path or the name of a bundled config
(``conic1d``, ``pendulum``, ``poly3d``).  ``--out``, ``--seed``,
``--verbosity`` and ``--jobs`` may also be set through ``DISSIPA_OUT``,
``DISSIPA_SEED``, ``DISSIPA_VERBOSITY`` and ``DISSIPA_JOBS``; flags win
over the environment, which wins over the file.

Exit codes: 0 success, 1 configuration error, 2 infeasible, 3 solver
failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

try:
    import tomllib
except ImportError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .analysis import AnalysisRequest, AnalysisResult, analyze, export_storage_csv
from .lmi import QSR_MODES
from .mesh import MeshError, export_csv, kuhn_triangulate
from .model import DynamicsModel, ModelError
from .sdp import SolverSettings

__all__ = ["RunConfig", "load_config", "main", "run", "EXIT_OK", "EXIT_CONFIG", "EXIT_INFEASIBLE",
           "EXIT_SOLVER", "EXIT_VERIFY"]

log = logging.getLogger("dissipa")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3, 4
BUNDLED = ("conic1d", "pendulum", "poly3d")
ENV_PREFIX = "DISSIPA_"


class ConfigError(ValueError):
    pass


# -- schema ------------------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Strict):
    name: str = "model"
    n: int = Field(ge=1)
    m: int = Field(ge=1)
    p: int = Field(ge=1)
    f: List[str]
    h: List[str]
    G: Optional[List[List[str]]] = None
    J: Optional[List[List[str]]] = None
    B: Optional[List[List[float]]] = None
    D: Optional[List[List[float]]] = None


class RegionBlock(_Strict):
    box: List[List[float]]
    divisions: Union[int, List[int]] = 10
    sweep: Optional[List[Union[int, List[int]]]] = None
    exclusion_cells: int = Field(1, ge=1)
    exclusion_halfwidth: Optional[float] = Field(None, gt=0)


class AnalysisBlock(_Strict):
    mode: str = "l2_gain"
    variant: Literal["auto", "no_affine", "with_affine"] = "auto"
    delta: float = Field(1e-9, gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    Q: Optional[List[List[float]]] = None
    bound_mode: Literal["interval", "sampled"] = "interval"
    refine_cap: int = Field(0, ge=0)

    @field_validator("mode")
    @classmethod
    def _mode(cls, v):
        if v not in QSR_MODES:
            raise ValueError(f"mode must be one of {', '.join(QSR_MODES)}")
        return v


class SolverBlock(_Strict):
    feas_tol: float = Field(1e-8, gt=0)
    gap_tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(200, ge=1)
    scale: bool = True
    backend: str = "ipm"


class VerifyBlock(_Strict):
    enabled: bool = True
    samples_per_simplex: int = Field(200, ge=1)
    trials: int = Field(100, ge=1)
    horizon: float = Field(5.0, gt=0)
    input_cap: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0)


class OutputBlock(_Strict):
    dir: str = "dissipa_out"
    storage_points: int = Field(101, ge=2)


class RunConfig(_Strict):
    """Validated run configuration (unknown keys are rejected)."""

    model: ModelBlock
    region: RegionBlock
    analysis: AnalysisBlock = AnalysisBlock()
    solver: SolverBlock = SolverBlock()
    verify: VerifyBlock = VerifyBlock()
    output: OutputBlock = OutputBlock()

    def build_model(self) -> DynamicsModel:
        mb = self.model
        return DynamicsModel.from_strings(mb.n, mb.m, mb.p, mb.f, mb.h, G=mb.G, J=mb.J, B=mb.B, D=mb.D,
                                          name=mb.name)

    def request(self, divisions=None, verbosity: int = 0) -> AnalysisRequest:
        a, s, v, r = self.analysis, self.solver, self.verify, self.region
        div = divisions if divisions is not None else r.divisions
        return AnalysisRequest(
            model=self.build_model(), region=tuple(map(tuple, r.box)),
            divisions=tuple(div) if isinstance(div, list) else int(div), mode=a.mode, variant=a.variant,
            Q=None if a.Q is None else tuple(map(tuple, a.Q)), epsilon=a.epsilon,
            exclusion_cells=r.exclusion_cells, exclusion_halfwidth=r.exclusion_halfwidth, delta=a.delta,
            bound_mode=a.bound_mode,
            solver=SolverSettings(feas_tol=s.feas_tol, gap_tol=s.gap_tol, max_iter=s.max_iter, scale=s.scale,
                                  backend=s.backend, verbosity=verbosity),
            refine_cap=a.refine_cap, verify=v.enabled, verify_samples=v.samples_per_simplex,
            verify_trials=v.trials, verify_horizon=v.horizon, input_cap=v.input_cap, seed=v.seed)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def resolve_config_path(name) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = p.stem if p.suffix == ".toml" else str(name)
    if stem in BUNDLED:
        return Path(str(resources.files("dissipa") / "configs" / f"{stem}.toml"))
    raise ConfigError(f"config file {name} not found (bundled configs: {', '.join(BUNDLED)})")


def load_config(path) -> RunConfig:
    """Read and validate a TOML config.

    Raises
    ------
    ConfigError
        Unreadable file, TOML syntax error or schema violation; the message
        names the offending field path.
    """
    p = resolve_config_path(path)
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {p}: {_format_errors(exc)}") from exc
    try:
        m = cfg.build_model()
        if len(cfg.region.box) != m.n or any(len(b) != 2 or b[0] >= b[1] for b in cfg.region.box):
            raise ConfigError(f"region.box: expected {m.n} intervals [lo, hi] with lo < hi")
    except (ModelError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model: {exc}") from exc
    return cfg


# -- output helpers ----------------------------------------------------------------------------

def _json_default(o):
    import numpy as np
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    path.write_text(text + "\n")
    return path


def _result_document(cfg: RunConfig, res: AnalysisResult) -> dict:
    d = res.to_dict()
    d["model"] = cfg.build_model().describe()
    d["verify_settings"] = cfg.verify.model_dump()
    return d


def _exit_for(res: AnalysisResult) -> int:
    return {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE,
            "verification_failed": EXIT_VERIFY}.get(res.status, EXIT_SOLVER)


def headline_text(d: dict) -> str:
    h = d.get("headline") or {}
    mode = d.get("mode")
    if mode == "conic" and "a" in h:
        return f"cone(a={h['a']:.3f}, b={h['b']:.3f})"
    if mode == "l2_gain" and "gamma" in h:
        return f"L2 gain γ = {h['gamma']:.6g}"
    if "nu" in h:
        return f"input strict passivity ν = {h['nu']:.6g}"
    if "rho" in h:
        return f"output strict passivity ρ = {h['rho']:.6g}"
    if "d" in h:
        return f"degenerate cone d = {h['d']:.6g}"
    return f"mode {mode}"


def report_text(d: dict) -> str:
    diag = d.get("diagnostics") or {}
    ver = d.get("verification")
    verdict = "not verified" if ver is None else ("verified" if ver.get("passed") else "verification FAILED")
    k = diag.get("n_simplices", "?")
    lines = [f"{headline_text(d)}, {k} simplices, {verdict}",
             f"status: {d.get('status')}  mode: {d.get('mode')}  variant: {d.get('variant')}"]
    if diag:
        lines.append("residuals: block {:.3g}, linear {:.3g}; objective {:.9g}".format(
            diag.get("max_block_residual", float("nan")), diag.get("max_linear_residual", float("nan")),
            diag.get("objective", float("nan"))))
    if ver:
        hji, sim = ver.get("hji", {}), ver.get("simulation", {})
        lines.append("hji max eigenvalue {:.3g}; simulation worst margin {:.3g} ({} violations in {} trials)".format(
            hji.get("worst_margin", float("nan")), sim.get("worst_margin", float("nan")),
            sim.get("violations", "?"), sim.get("samples", "?")))
    if d.get("message"):
        lines.append(d["message"])
    return "\n".join(lines)


# -- subcommands -------------------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig, out: Path, verbosity: int) -> int:
    res = analyze(cfg.request(verbosity=verbosity))
    path = dump_json(_result_document(cfg, res), out / "result.json")
    if res.certificate is not None:
        export_storage_csv(res.certificate, out / "storage.csv", cfg.output.storage_points)
    log.info("wrote %s", path)
    print(report_text(res.to_dict()))
    return _exit_for(res)


def cmd_verify(cfg: RunConfig, result_path: Path, out: Path) -> int:
    from .verify import verify_result
    try:
        d = json.loads(Path(result_path).read_text())
        res = AnalysisResult.from_dict(d)
    except (OSError, ValueError, KeyError, MeshError) as exc:
        raise ConfigError(f"cannot read result file {result_path}: {exc}") from exc
    if res.certificate is None:
        print(f"no certificate in {result_path} (status {res.status})")
        return _exit_for(res) if res.status != "optimal" else EXIT_VERIFY
    model = cfg.build_model()
    v = cfg.verify
    rep = verify_result(model, res, samples_per_simplex=v.samples_per_simplex, trials=v.trials,
                        horizon=v.horizon, input_cap=v.input_cap, seed=v.seed)
    dump_json(rep, out / "verification.json")
    same = d.get("verification") is None or d["verification"] == json.loads(json.dumps(rep, default=_json_default))
    print(f"verification {'passed' if rep['passed'] else 'FAILED'}"
          f"{'' if same else ' (differs from the stored verification)'}")
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def cmd_mesh(cfg: RunConfig, out: Path) -> int:
    req = cfg.request()
    variant = req.resolved_variant()
    if variant == "with_affine":
        from .analysis import _mesh_for
        tri, _ = _mesh_for(req, variant)
    else:
        tri = kuhn_triangulate(req.region_array(), req.divisions_array())
    v, s = export_csv(tri, out)
    print(f"{tri.n_simplices} simplices, {tri.n_vertices} vertices -> {v}, {s}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, verbosity: int) -> int:
    levels = cfg.region.sweep or [cfg.region.divisions]
    rows, keys, worst = [], [], EXIT_OK
    for div in levels:
        t0 = time.perf_counter()
        res = analyze(cfg.request(divisions=div, verbosity=verbosity))
        tag = "x".join(map(str, div)) if isinstance(div, list) else str(div)
        dump_json(_result_document(cfg, res), out / f"result_{tag}.json")
        for k in res.headline:
            if k not in keys:
                keys.append(k)
        rows.append((tag, res.diagnostics.get("n_simplices", ""), res.status,
                     res.diagnostics.get("objective", ""), res.headline))
        log.info("divisions %s: %s %s (%.1fs)", tag, res.status, res.headline, time.perf_counter() - t0)
        code = _exit_for(res)
        worst = code if worst == EXIT_OK else worst
    path = out / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["divisions", "n_simplices", "status", "objective"] + keys)
        for tag, k, st, obj, head in rows:
            w.writerow([tag, k, st, "" if obj == "" else repr(float(obj))]
                       + [repr(float(head[c])) if c in head else "" for c in keys])
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return worst


def cmd_report(result_path) -> int:
    try:
        d = json.loads(Path(result_path).read_text())
        if not isinstance(d, dict) or "status" not in d:
            raise ValueError("not a result document")
    except (OSError, ValueError) as exc:
        print(f"error: cannot read result file {result_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report_text(d))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dissipa", description="Local QSR dissipativity analysis with CPA storage.")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config path or bundled name")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="verification seed (u64)")
    common.add_argument("--verbosity", type=int, choices=range(4), help="0..3")
    common.add_argument("--jobs", type=int, help="worker count (recorded; work runs in one process)")
    for name, hlp in (("analyze", "solve and write result.json and storage.csv"),
                      ("verify", "re-check an existing result file"),
                      ("mesh", "write the triangulation CSV files"),
                      ("sweep", "analyze over region.sweep and write sweep.csv")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        if name == "verify":
            p.add_argument("--result", help="result JSON (default <out>/result.json)")
        if name == "sweep":
            p.add_argument("--divisions", type=int, nargs="+", help="override region.sweep")
    rp = sub.add_parser("report", help="print a summary of a result file")
    rp.add_argument("result")
    return ap


def _env(name, cast=str):
    v = os.environ.get(ENV_PREFIX + name)
    if v is None or v == "":
        return None
    try:
        return cast(v)
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}{name}: {exc}") from exc


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args.result)
    try:
        verbosity = args.verbosity if args.verbosity is not None else (_env("VERBOSITY", int) or 0)
        logging.basicConfig(level={0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG),
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
        cfg_path = args.config or _env("CONFIG")
        if cfg_path is None:
            raise ConfigError("--config is required (or set DISSIPA_CONFIG)")
        cfg = load_config(cfg_path)
        seed = args.seed if args.seed is not None else _env("SEED", int)
        if seed is not None:
            if not 0 <= seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.verify.seed = seed
        jobs = args.jobs if args.jobs is not None else _env("JOBS", int)
        if jobs is not None and jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out = Path(args.out or _env("OUT") or cfg.output.dir)
        if args.command == "analyze":
            return cmd_analyze(cfg, out, verbosity)
        if args.command == "verify":
            return cmd_verify(cfg, Path(args.result) if args.result else out / "result.json", out)
        if args.command == "mesh":
            return cmd_mesh(cfg, out)
        if args.command == "sweep":
            if args.divisions:
                cfg.region.sweep = list(args.divisions)
            return cmd_sweep(cfg, out, verbosity)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, MeshError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG  # pragma: no cover


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
