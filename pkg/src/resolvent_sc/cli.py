"""
Command-line pipeline: build -> diagonalize -> solve -> fit -> compare -> report.

Every subcommand reads one JSON run configuration, writes its artifacts into
the output directory and finishes with ``manifest.json`` listing each file with
its SHA-256. Exit codes: 0 success, 1 usage, 2 convergence failure (or a red
self-check), 3 internal error.

Example::

    resolvent-sc build --config run.json --out out/ising
    resolvent-sc report --config run.json --out out/ising --seed 3
    resolvent-sc selfcheck --out out/check
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "CONFIG_SCHEMA",
    "RunConfig",
    "RunManifest",
    "UsageError",
    "ConvergenceFailure",
    "load_config",
    "run",
    "main",
]

log = logging.getLogger("resolvent_sc")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE, EXIT_INTERNAL = 0, 1, 2, 3
ANSATZ_CLASSES = ("lorentz", "gauss", "lg", "effective")
PARAM_SOLVERS = ("lorentz", "gauss", "voigt")
MANIFEST = "manifest.json"
LOCKFILE = ".lock"


class UsageError(Exception):
    """Bad invocation or configuration (exit code 1)."""


class ConvergenceFailure(Exception):
    """A requested solver did not converge (exit code 2)."""


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer"}

CONFIG_SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": _obj(
            {
                "kind": {"enum": ["ising", "ensemble"]},
                "seed": {"type": "integer", "minimum": 0},
                "ising": _obj(
                    {"n_sites": {"type": "integer", "minimum": 2, "maximum": 14}, "j_zz": _NUM, "h_z": _NUM, "g_x": _NUM}
                ),
                "ensemble": _obj(
                    {
                        "dim": {"type": "integer", "minimum": 4},
                        "energy_width": _POS,
                        "band": _POS,
                        "strength": _POS,
                        "cutoff": _POS,
                    }
                ),
            },
            ["kind"],
        ),
        "solver": _obj(
            {
                "grid_points": {"type": "integer", "minimum": 16},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": _POS,
                "eta": {"type": "number", "minimum": 0},
                "renormalize": {"type": "boolean"},
                "max_shells": {"type": "integer", "minimum": 1},
            }
        ),
        "ansatz": _obj(
            {
                "classes": {"type": "array", "items": {"enum": list(ANSATZ_CLASSES)}, "uniqueItems": True},
                "param_solvers": {"type": "array", "items": {"enum": list(PARAM_SOLVERS)}, "uniqueItems": True},
                "third_order_weight": _NUM,
            }
        ),
        "outputs": _obj(
            {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "uniqueItems": True, "minItems": 1},
            }
        ),
        "oracle": _obj(
            {
                "enabled": {"type": "boolean"},
                "indices": {"oneOf": [{"type": "null"}, {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
                "eta_ladder": _obj({"start": _POS, "halvings": {"type": "integer", "minimum": 1, "maximum": 8}}),
            }
        ),
    },
    ["schema_version", "model"],
)

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "model": {
        "kind": "ensemble",
        "seed": 0,
        "ising": {"n_sites": 8, "j_zz": 1.0, "h_z": 0.5, "g_x": 1.05},
        "ensemble": {"dim": 200, "energy_width": 2.0, "band": 0.5, "strength": 0.3, "cutoff": 3.0},
    },
    "solver": {"grid_points": 1024, "damping": 0.3, "max_iter": 500, "tol": 1e-8, "eta": 1e-4, "renormalize": True, "max_shells": 32},
    "ansatz": {"classes": ["lorentz", "gauss", "lg"], "param_solvers": ["lorentz"], "third_order_weight": 1.0},
    "outputs": {"directory": "out", "formats": ["csv", "json"]},
    "oracle": {"enabled": True, "indices": None, "eta_ladder": {"start": 0.1, "halvings": 3}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {e.message}")


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration (defaults filled in).

    ``to_json`` is canonical (sorted keys, fixed indent) so that
    ``RunConfig.from_json(c.to_json()).to_json() == c.to_json()``.
    """

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        _validate(raw)
        full = _merge(DEFAULTS, raw)
        _validate(full)
        return cls(full)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["model"]["seed"] = int(seed)
        return RunConfig.from_dict(d)

    def __getitem__(self, key):
        return self.data[key]


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_json(text)


@dataclass
class RunManifest:
    """Ledger of one run. ``files`` maps relative paths to SHA-256 digests."""

    command: str
    config_hash: str
    version: str
    seeds: dict
    threads: int | None
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "running"
    failures: list = field(default_factory=list)
    convergence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "version": self.version,
            "seeds": self.seeds,
            "threads": self.threads,
            "files": dict(sorted(self.files.items())),
            "timings": self.timings,
            "status": self.status,
            "failures": self.failures,
            "convergence": self.convergence,
        }


# ---------------------------------------------------------------- writers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


class _Writer:
    """Writes artifacts and records their hashes in the manifest."""

    def __init__(self, root: Path, manifest: RunManifest, formats):
        self.root = root
        self.manifest = manifest
        self.formats = set(formats)

    def _record(self, rel: str):
        path = self.root / rel
        self.manifest.files[rel] = hashlib.sha256(path.read_bytes()).hexdigest()

    def csv(self, rel: str, header, rows):
        if "csv" not in self.formats:
            return
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self._record(rel)

    def json(self, rel: str, obj, force: bool = False):
        if "json" not in self.formats and not force:
            return
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")
        self._record(rel)

    def figure(self, rel: str, fig):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        # fixed metadata keeps the bytes reproducible
        fig.savefig(path, dpi=100, metadata={"Software": None})
        self._record(rel)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable({k: getattr(obj, k) for k in obj.__dataclass_fields__})
    return obj


# ---------------------------------------------------------------- stages


@dataclass
class _State:
    config: RunConfig
    system: object = None
    spectrum: object = None
    indices: list = field(default_factory=list)
    smoothed: dict = field(default_factory=dict)
    meanfield: object = None
    fits: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    unconverged: list = field(default_factory=list)


def _build_system(cfg: RunConfig):
    from . import model

    m = cfg["model"]
    if m["kind"] == "ising":
        p = m["ising"]
        return model.build_ising_chain(p["n_sites"], p["j_zz"], p["h_z"], p["g_x"])
    p = m["ensemble"]
    prof = model.gaussian_profile(p["dim"], p["energy_width"], p["band"], p["strength"], seed=m["seed"], cutoff=p["cutoff"])
    return model.build_banded_ensemble(p["dim"], prof)


def _stage_build(st: _State, out: _Writer):
    from . import model, oracle

    cfg = st.config
    st.system = _build_system(cfg)
    dim = st.system.dim
    idx = cfg["oracle"]["indices"]
    st.indices = sorted(set(idx)) if idx is not None else [dim // 4, dim // 2, (3 * dim) // 4]
    bad = [i for i in st.indices if i >= dim]
    if bad:
        raise UsageError(f"config error at oracle/indices: {bad} out of range for dimension {dim}")
    path = out.root / "system.json"
    model.save_system(st.system, path)
    out._record("system.json")
    out.csv("bare.csv", ["index", "a", "vdiag"], zip(range(dim), st.system.a, st.system.vdiag))
    if not cfg["oracle"]["enabled"]:
        return
    st.spectrum = oracle.diagonalize(st.system)
    out.csv("spectrum.csv", ["n", "eigenvalue"], enumerate(st.spectrum.eigenvalues))
    rows, srows, pag = [], [], {}
    for i in st.indices:
        ov = oracle.overlaps(st.spectrum, i)
        rows += [(i, n, lam, p) for n, (lam, p) in enumerate(zip(st.spectrum.eigenvalues, ov.p))]
        sd = oracle.smooth_distribution(ov, st.spectrum)
        st.smoothed[i] = sd
        srows += [(i, lam, p, s, d) for lam, p, s, d in zip(sd.lambdas, sd.p, sd.s_of_lambda, sd.density())]
        if dim <= 400:
            ladder = cfg["oracle"]["eta_ladder"]
            pag[i] = _pag_summary(oracle.verify_pag(st.system, st.spectrum, i, eta=ladder["start"], halvings=ladder["halvings"]))
    out.csv("overlaps.csv", ["index", "n", "lambda", "p"], rows)
    out.csv("smoothed.csv", ["index", "lambda", "p", "S", "density"], srows)
    if pag:
        out.json("pag.json", pag)


def _pag_summary(rep):
    return {"etas": list(rep.etas), "deviations": list(rep.deviations), "monotone": bool(rep.monotone)}


def _stage_solve(st: _State, out: _Writer):
    from . import ansatz, meanfield

    cfg = st.config
    s = cfg["solver"]
    opts = meanfield.SolverOptions(s["grid_points"], s["damping"], s["max_iter"], s["tol"], s["eta"], s["renormalize"])
    shells = meanfield.shells_from_system(st.system, max_shells=s["max_shells"])
    sol = meanfield.solve(shells, opts)
    st.meanfield = sol
    if not sol.converged:
        st.unconverged.append("meanfield")
    rows = []
    for k in range(shells.count):
        for lam, rho, im, re in zip(sol.grid, sol.rho[k], sol.im_g[k], sol.re_g[k]):
            rows.append((k, lam, rho, im, re))
    out.csv("meanfield.csv", ["shell", "lambda", "density", "im_g", "re_g"], rows)
    out.csv("meanfield_trace.csv", ["iteration", "residual", "normalization_drift"], sol.trace)
    summary = {
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "diagnostic": sol.diagnostic,
        "options": opts.to_dict(),
        "shells": [
            {"center": c, "size": n, "peak": sol.peak(k)[0], "width": sol.width(k), "hwhm": sol.hwhm(k), "normalization": sol.normalization(k)}
            for k, (c, n) in enumerate(zip(shells.centers, shells.sizes))
        ],
    }
    solvers = cfg["ansatz"]["param_solvers"]
    params, degenerate = {}, {}
    if solvers:
        try:
            lor = ansatz.solve_lorentz(shells)
            params["lorentz"] = lor
            if "gauss" in solvers or "voigt" in solvers:
                params["gauss"] = ansatz.solve_gauss_tail(shells, lor)
            if "voigt" in solvers:
                params["voigt"] = ansatz.solve_voigt(shells, lor, params["gauss"])
        except (meanfield.DegenerateDistributionError, ansatz.TailRegimeError) as exc:
            # later solvers depend on earlier ones, so all remaining ones are skipped
            for name in solvers:
                if name not in params:
                    degenerate[name] = f"{type(exc).__name__}: {exc}"
                    st.unconverged.append(f"ansatz:{name}")
    for name, p in params.items():
        if name in solvers and not p.converged:
            st.unconverged.append(f"ansatz:{name}")
    summary["param_solvers"] = {
        k: {"converged": p.converged, "residual": p.residual, "iterations": p.iterations, "params": list(p.params), "extra": p.extra}
        for k, p in params.items()
        if k in solvers
    }
    for name, reason in degenerate.items():
        summary["param_solvers"][name] = {"converged": False, "error": reason}
    out.json("meanfield.json", summary)


def _stage_fit(st: _State, out: _Writer):
    from . import ansatz, corrections, oracle
    from .specfun import GridFunction

    cfg = st.config
    if st.spectrum is None:
        raise UsageError("config error at oracle/enabled: fitting needs the oracle")
    kinds = tuple(cfg["ansatz"]["classes"])
    report, rows = {}, []
    for i in st.indices:
        sd = st.smoothed[i]
        a = float(st.system.a[i])
        fits = ansatz.fit_all(sd.lambdas, sd.density(), sd.spacing, a, kinds=kinds)
        st.fits[i] = fits
        ranked = sorted(fits.values(), key=lambda f: f.l1)
        dens = sd.density()
        cols = {k: f.density(sd.lambdas) for k, f in fits.items()}
        for n, lam in enumerate(sd.lambdas):
            rows.append([i, lam, dens[n]] + [v for k in kinds for v in (cols[k][n], cols[k][n] - dens[n])])
        # skew of the cross term between this index and its neighbour's distribution
        j = i + 1 if i + 1 < st.system.dim else i - 1
        sdj = oracle.smooth_distribution(oracle.overlaps(st.spectrum, j), st.spectrum, window=sd.window)
        pj = GridFunction(sd.lambdas, sdj.density_on(sd.lambdas))
        pi = GridFunction(sd.lambdas, dens)
        trace = corrections.third_order_from_p(pi, pj, weight=cfg["ansatz"]["third_order_weight"])
        skew = corrections.skewness_diagnostic(trace, pi)
        report[str(i)] = {
            "center_a": a,
            "ranking": [{"class": f.kind, "l1": f.l1, "params": f.params} for f in ranked],
            "skew": skew.to_dict(),
            "skew_partner": j,
        }
    header = ["index", "lambda", "oracle_density"] + [c for k in kinds for c in (k, f"residual_{k}")]
    out.csv("fits.csv", header, rows)
    out.json("fit_report.json", report)


def _stage_compare(st: _State, out: _Writer):
    cfg = st.config
    rows, summary = [], {}
    sol = st.meanfield
    for i in st.indices:
        sd = st.smoothed[i]
        s = sol.shell_index(i)
        mf = np.interp(sd.lambdas, sol.grid, sol.rho[s], left=0.0, right=0.0)
        dens = sd.density()
        l1_mf = float(np.sum(np.abs(mf - dens)) * sd.spacing)
        entry = {"shell": s, "l1_meanfield": l1_mf}
        if i in st.fits:
            entry.update({f"l1_{k}": f.l1 for k, f in st.fits[i].items()})
            entry["best_class"] = min(st.fits[i].values(), key=lambda f: f.l1).kind
        summary[str(i)] = entry
        rows += [(i, lam, d, m, m - d) for lam, d, m in zip(sd.lambdas, dens, mf)]
    out.csv("compare.csv", ["index", "lambda", "oracle_density", "meanfield_density", "residual"], rows)
    out.json("compare.json", {"indices": summary, "classes": cfg["ansatz"]["classes"]})
    st.compare = summary


def _stage_report(st: _State, out: _Writer):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for i in st.indices:
        sd = st.smoothed[i]
        fig, (ax, axr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
        ax.plot(sd.lambdas, sd.density(), "k.", ms=3, label="oracle (smoothed)")
        for k, f in st.fits.get(i, {}).items():
            y = f.density(sd.lambdas)
            ax.plot(sd.lambdas, y, lw=1.2, label=f"{k} (L1={f.l1:.3f})")
            axr.plot(sd.lambdas, y - sd.density(), lw=1.0)
        if st.meanfield is not None:
            s = st.meanfield.shell_index(i)
            ax.plot(st.meanfield.grid, st.meanfield.rho[s], "--", lw=1.0, label="mean field")
        ax.set_ylabel(r"$e^{S}p$")
        ax.set_title(f"index {i}")
        ax.legend(fontsize=7)
        axr.set_xlabel(r"$\lambda$")
        axr.set_ylabel("residual")
        fig.tight_layout()
        out.figure(f"figures/distribution_{i}.png", fig)
        plt.close(fig)
    if st.meanfield is not None:
        sol = st.meanfield
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        for i in st.indices:
            s = sol.shell_index(i)
            a1.plot(sol.grid, sol.im_g[s], label=f"Im G, index {i}")
            a1.plot(sol.grid, sol.re_g[s], "--", label=f"Re G, index {i}")
        a1.set_xlabel(r"$\lambda$")
        a1.legend(fontsize=7)
        if len(sol.trace):
            a2.semilogy(sol.trace[:, 0], np.maximum(sol.trace[:, 1], 1e-300))
        a2.set_xlabel("iteration")
        a2.set_ylabel("residual")
        fig.tight_layout()
        out.figure("figures/meanfield.png", fig)
        plt.close(fig)
    out.json("report.json", {"indices": st.indices, "compare": st.compare, "unconverged": st.unconverged})


PIPELINES = {
    "build": ("build",),
    "solve": ("build", "solve"),
    "fit": ("build", "fit"),
    "compare": ("build", "solve", "fit", "compare"),
    "report": ("build", "solve", "fit", "compare", "report"),
}
STAGES = {"build": _stage_build, "solve": _stage_solve, "fit": _stage_fit, "compare": _stage_compare, "report": _stage_report}


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class _Lock:
    def __init__(self, root: Path):
        self.path = root / LOCKFILE

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"output directory is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _prepare_out(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    # a previous manifest means a previous run: clear its listed files so the
    # directory only ever holds what the new manifest lists
    old = root / MANIFEST
    if old.exists():
        try:
            for rel in json.loads(old.read_text()).get("files", {}):
                (root / rel).unlink(missing_ok=True)
        except (json.JSONDecodeError, OSError):
            pass
        old.unlink()
    stray = [p for p in root.rglob("*") if p.is_file() and p.name != LOCKFILE]
    if stray:
        raise UsageError(f"output directory {root} contains files not produced by a previous run: {stray[0]}")


def run(command: str, config: RunConfig, out_dir, threads: int | None = None, seed_source: str = "config") -> RunManifest:
    """Execute one pipeline and write its manifest.

    Raises ``ConvergenceFailure`` (after writing everything) when a requested
    solver did not converge.
    """
    if command not in PIPELINES:
        raise UsageError(f"unknown command {command!r}")
    root = Path(out_dir)
    manifest = RunManifest(
        command=command,
        config_hash=config.hash(),
        version=_version(),
        seeds={"model": config["model"]["seed"], "source": seed_source},
        threads=threads,
    )
    root.mkdir(parents=True, exist_ok=True)
    with _Lock(root):
        _prepare_out(root)
        writer = _Writer(root, manifest, config["outputs"]["formats"])
        writer.json("config.json", config.to_dict(), force=True)
        st = _State(config)
        try:
            for stage in PIPELINES[command]:
                t0 = time.perf_counter()
                log.info("stage %s", stage)
                STAGES[stage](st, writer)
                manifest.timings[stage] = round(time.perf_counter() - t0, 6)
        except UsageError:
            raise
        except Exception as exc:
            manifest.status = "failed"
            manifest.failures.append({"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
            _write_manifest(root, manifest)
            raise
        manifest.convergence = {"unconverged": st.unconverged}
        manifest.status = "unconverged" if st.unconverged else "ok"
        _write_manifest(root, manifest)
    if st.unconverged:
        raise ConvergenceFailure(", ".join(st.unconverged))
    return manifest


def _write_manifest(root: Path, manifest: RunManifest):
    (root / MANIFEST).write_text(json.dumps(_jsonable(manifest.to_dict()), sort_keys=True, indent=2) + "\n")


def selfcheck(out_dir, numbers=None) -> bool:
    """Run the acceptance checks, print one line each and write ``selfcheck.json``."""
    from . import acceptance

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("selfcheck", "", _version(), {}, None)
    with _Lock(root):
        _prepare_out(root)
        results = []
        for fn in acceptance.CHECKS if numbers is None else [acceptance.CHECKS[n - 1] for n in numbers]:
            c = fn()
            print(c.line(), flush=True)
            results.append(c.to_dict())
            manifest.timings[f"criterion_{c.number}"] = round(c.seconds, 6)
        writer = _Writer(root, manifest, ["json"])
        writer.json("selfcheck.json", results)
        ok = all(r["passed"] for r in results)
        manifest.status = "ok" if ok else "red"
        _write_manifest(root, manifest)
    return ok


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides outputs.directory)")
    common.add_argument("--seed", type=int, help="model seed (overrides model.seed)")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--verbose", "-v", action="store_true")
    p = _Parser(prog="resolvent-sc", description="Resolvent self-consistency pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("build", "build the system and run the exact oracle"),
        ("solve", "mean-field and ansatz parameter solvers"),
        ("fit", "fit ansatz classes to the oracle distributions"),
        ("compare", "solve + fit and compare against the oracle"),
        ("report", "compare and render figures"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    sc = sub.add_parser("selfcheck", parents=[common], help="run the acceptance checks")
    sc.add_argument("--only", type=int, nargs="+", choices=range(1, 11), metavar="N", help="criterion numbers")
    return p


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads(args.threads)
        if args.command == "selfcheck":
            ok = selfcheck(args.out or Path("selfcheck"), args.only)
            return EXIT_OK if ok else EXIT_CONVERGENCE
        if args.config is None:
            raise UsageError("--config is required")
        cfg = load_config(args.config)
        source = "config"
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
            source = "cli"
        out = args.out or Path(cfg["outputs"]["directory"])
        manifest = run(args.command, cfg, out, threads=args.threads, seed_source=source)
        print(f"{args.command}: {len(manifest.files)} files written to {out}")
        if limiter is not None:
            limiter.restore_original_limits()
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceFailure as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except Exception as exc:  # noqa: BLE001 - mapped to the internal-error exit code
        if args.verbose:
            traceback.print_exc()
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
