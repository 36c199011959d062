"""Experiment configs, verification suites, gap sweeps and report emission.

Configs are flat INI files with ``[space]``, ``[operator]`` and ``[run]``
sections.  Every suite writes into ``<out>/<suite>/``; the process exit status
is 0 exactly when every selected suite passes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import gge as gge_mod
from .calculus import coefficients, default_grids, synthesize
from .molecules import (Molecule, calderon_split, cancellation_chain, molecule_tail_check,
                        noncancellative_atoms, pi1_of_tent, reproducing_constants,
                        saturating_tent_atom, unit_partition, validate_molecule,
                        validate_tent_atom)
from .operator import SpectralOperator, decompose_cached
from .space import Ball, Space, build_grid_space, space_to_json
from .squarefn import (field_norm, hardy_norms, lower_bound_constant, random_fields,
                       spectral_identity_terms)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SuiteResult",
    "SUITES",
    "build_operator_from_config",
    "emit",
    "gap_sweep",
    "load_config",
    "main",
    "run_experiment",
    "self_check",
]

SCHEMA_VERSION = 1

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    dims: int = 1
    extent: float = 16.0
    count: int = 128
    origin: float = -8.0
    kind: str = "schrodinger"
    boundary: str = "dirichlet"
    potential: str = "harmonic"
    omega: float = 1.0
    c: float = 0.0
    m_pow: int = 2
    shift: float = 0.0
    order: float = 2.0
    grid_ratio: float = 1.02
    suites: tuple[str, ...] = ()
    out: str = "reports"
    seed: int = 0
    fields: int = 20
    main_fields: int = 50
    N: int = 2
    ball_radius: float = 1.0
    sweep_shifts: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    gge_times: tuple[float, ...] = (0.5, 1.0, 1.5)
    atoms: int = 10
    parallel: bool = False
    cache_dir: str = ""

    def operator_descriptor(self) -> dict:
        desc = {"kind": self.kind, "boundary": self.boundary}
        if self.kind == "shift":
            desc["c"] = self.c
        if self.kind in ("schrodinger", "fractional"):
            desc.update(potential=self.potential, omega=self.omega, value=self.c)
        if self.kind == "fractional":
            desc["m_pow"] = self.m_pow
        if self.shift:
            desc["shift"] = self.shift
        return desc

    def validate(self) -> None:
        unknown = [s for s in self.suites if s not in SUITES]
        if unknown:
            raise ConfigError(f"unknown suites: {', '.join(unknown)}")
        if self.dims not in (1, 2) or self.count < 1 or not self.extent > 0:
            raise ConfigError("space needs dims in {1,2}, count >= 1 and extent > 0")
        if not self.grid_ratio > 1:
            raise ConfigError("grid_ratio must exceed 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.N < 1:
            raise ConfigError("N must be at least 1")


_SECTIONS = {
    "space": ("dims", "extent", "count", "origin"),
    "operator": ("kind", "boundary", "potential", "omega", "c", "m_pow", "shift", "order"),
    "run": ("grid_ratio", "suites", "out", "seed", "fields", "main_fields", "N",
            "ball_radius", "sweep_shifts", "gge_times", "atoms", "parallel", "cache_dir"),
}


def _coerce(name: str, raw: str):
    default = getattr(ExperimentConfig, name)
    if name == "suites":
        return tuple(raw.replace(",", " ").split())
    if isinstance(default, tuple):
        return _floats(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return type(default)(raw)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read a flat INI config; keyword overrides win over the file."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise ConfigError(f"cannot read config {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    values[key] = _coerce(key, raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    data = asdict(cfg)
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for k in keys:
            v = data[k]
            parser[section][k] = " ".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def build_space_from_config(cfg: ExperimentConfig) -> Space:
    return build_grid_space(cfg.dims, cfg.extent, cfg.count, cfg.origin)


def build_operator_from_config(cfg: ExperimentConfig) -> SpectralOperator:
    space = build_space_from_config(cfg)
    return decompose_cached(space, cfg.operator_descriptor(), cfg.order,
                            cfg.cache_dir or None)


# --- suites --------------------------------------------------------------------------

@dataclass
class SuiteResult:
    name: str
    passed: bool
    summary: dict
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)


def _center_index(space: Space) -> int:
    middle = space.points.mean(axis=0)
    return int(np.argmin(((space.points - middle) ** 2).sum(axis=1)))


def _table(report: gge_mod.FitReport, columns) -> tuple[list[str], list[list]]:
    return list(columns), [[row.get(c) for c in columns] for row in report.rows]


def suite_space(cfg, op):
    space = op.space
    fit = space.doubling
    return SuiteResult("space", True,
                       {"points": space.size, "total_mass": space.total_mass,
                        "diameter": space.diameter, "n": fit.n, "C_d": fit.constant,
                        "n_stderr": fit.stderr, "degenerate": fit.degenerate,
                        "space": json.loads(space_to_json(space))})


def suite_op(cfg, op):
    res = op.residuals
    ok = res.get("orthonormality", 0) <= 1e-10 and res.get("reconstruction", 0) <= 1e-8
    rows = [[i, float(v)] for i, v in enumerate(op.eigenvalues)]
    return SuiteResult("op", bool(ok),
                       {"lambda0": op.gap, "gapped": op.gapped, "lambda_max":
                        float(op.eigenvalues.max()), "order": op.order, "residuals": res,
                        "descriptor": op.descriptor},
                       {"eigenvalues.csv": (["index", "eigenvalue"], rows)})


def suite_identity(cfg, op):
    f = random_fields(op, cfg.fields, cfg.seed)
    grid = default_grids(op, cfg.grid_ratio, power=1).local
    terms = spectral_identity_terms(op, f, grid, richardson=True)
    norm2 = field_norm(op.space, f) ** 2
    ratio = np.sqrt(terms.local_energy / norm2)
    c = lower_bound_constant(op.gap) if op.gapped else 0.0
    resid = terms.residual
    rows = [[i, norm2[i], terms.local_energy[i], terms.spectral_term[i], resid[i],
             ratio[i], c] for i in range(f.shape[1])]
    ok_identity = bool(np.all(resid <= 1e-6 * norm2))
    ok_lower = bool(not op.gapped or np.all(ratio >= c - 1e-6))
    return SuiteResult("identity", ok_identity and ok_lower,
                       {"max_relative_residual": float((resid / norm2).max()),
                        "min_ratio": float(ratio.min()), "c_lower": c,
                        "gapped": op.gapped, "scaling": "t L e^{-t L}"},
                       {"identity.csv": (["field", "norm2", "local_energy", "spectral_term",
                                          "residual", "ratio", "c_lower"], rows)})


def _offdiag_times():
    return tuple(np.geomspace(0.05, 8.0, 40))


def suite_gge(cfg, op):
    space = op.space
    x = _center_index(space)
    samples = [(x, y, t) for t in cfg.gge_times for y in range(space.size)]
    rep2 = gge_mod.gge_fit(op, 2, samples)
    rep1 = gge_mod.gge_fit(op, 1, samples)
    ball = Ball(x, cfg.ball_radius)
    first, second = gge_mod.offdiag_profiles(op, ball, 4, _offdiag_times(), p=1)
    c = rep2.constants["c"] or 0.0
    decay = gge_mod.decay_shape_check(c, space.n, op.order)
    ok = rep2.passed and rep1.passed and first.passed and second.passed and decay["finite"] \
        and c > 0
    cols = ["x", "y", "t", "lhs", "bound", "ratio"]
    return SuiteResult("gge", bool(ok),
                       {"p2": rep2.to_dict(), "p1": rep1.to_dict(),
                        "offdiag_ball": first.to_dict(), "offdiag_complement": second.to_dict(),
                        "decay_shape": decay},
                       {"gge.csv": _table(rep2, cols), "gge_p1.csv": _table(rep1, cols),
                        "offdiag_ball.csv": _table(first, ["k", "t", "lhs", "bound", "ratio"]),
                        "offdiag_complement.csv": _table(second,
                                                         ["k", "t", "lhs", "bound", "ratio"])})


def _decay_times(op):
    hi = (30 / op.gap) ** (1 / op.order) if op.gapped else 10.0
    return tuple(np.geomspace(0.1, max(hi, 1.0), 60))


def suite_decay(cfg, op):
    space = op.space
    ball = Ball(_center_index(space), cfg.ball_radius)
    everything = np.ones(space.size, dtype=bool)
    B = space.ball_mask(ball)
    far = ~space.ball_mask(ball.scaled(2))
    sets = [(everything, everything), (B, B)]
    if far.any():
        sets.append((B, far))
    times = _decay_times(op)
    rep = gge_mod.gap_decay_fit(op, sets, times)
    heat = gge_mod.gap_decay_fit(op, sets[:1], times, family="heat")
    heat_norms = [r["lhs"] for r in heat.rows]
    summary = {"derivative": rep.to_dict(), "heat": heat.to_dict(), "gapped": op.gapped,
               "heat_norm_min": float(min(heat_norms)), "heat_norm_max": float(max(heat_norms))}
    if op.gapped:
        comb = gge_mod.gap_offdiag_profile(op, ball, 3, times[::4])
        summary["combined"] = comb.to_dict()
    return SuiteResult("decay", rep.passed, summary,
                       {"decay.csv": _table(rep, ["set", "t", "lhs", "bound", "ratio"])})


def atom_family(op: SpectralOperator, count: int, radius: float = 1.0) -> list[Molecule]:
    """Normalised indicator atoms ``1_B / mu(B)`` on balls spread over the middle half."""
    space = op.space
    lo, hi = space.points.min(axis=0), space.points.max(axis=0)
    quarter = (hi - lo) / 4
    targets = np.linspace(lo + quarter, hi - quarter, count)
    out = []
    for target in targets:
        c = int(np.argmin(((space.points - target) ** 2).sum(axis=1)))
        ball = Ball(c, radius)
        mask = space.ball_mask(ball)
        out.append(Molecule(np.where(mask, 1.0 / space.measure(mask), 0.0), ball, 1))
    return out


def suite_molecules(cfg, op):
    if not op.gapped:
        return SuiteResult("molecules", False, {"error": "operator has no spectral gap"})
    space = op.space
    grids = default_grids(op, cfg.grid_ratio)
    consts = reproducing_constants(cfg.N, op.order, op.eigenvalues)
    fields = random_fields(op, 5, cfg.seed, range_only=True)
    split_res = [calderon_split(op, fields[:, i], cfg.N, grids.local, consts).residual
                 for i in range(fields.shape[1])]
    ball = Ball(_center_index(space), min(cfg.ball_radius, 2.0))
    u = saturating_tent_atom(space, ball, grids.local)
    tent = validate_tent_atom(space, u, ball)
    pi1, b = pi1_of_tent(op, u, consts, with_b=True)
    mol = Molecule(pi1, ball, cfg.N, "cancellative", cancellation_chain(op, b, cfg.N))
    mrep = validate_molecule(op, mol)
    scaled = validate_molecule(op, mol.scaled(1 / mrep.factor)) if mrep.factor > 0 else mrep

    f = fields[:, 0] / field_norm(space, fields[:, 0], 1)
    pieces = noncancellative_atoms(op, f, unit_partition(space), consts)
    coef = np.polynomial.polynomial.polyval(op.eigenvalues, np.asarray(consts.c)) \
        * np.exp(-2 * op.eigenvalues)
    pi2 = synthesize(op, coef * coefficients(op, f))
    rebuilt = sum(p.coefficient * p.molecule.values for p in pieces)
    reassembly = float(field_norm(space, rebuilt - pi2) / field_norm(space, pi2))
    atom_ok = all(validate_molecule(op, p.molecule).passed for p in pieces if p.coefficient)

    family = atom_family(op, cfg.atoms)
    tails = [molecule_tail_check(op, a, grids) for a in family]
    central = tails[len(tails) // 2]
    tail_rows = [[r["k"], r.get("est1_lhs"), r["est1_rhs"], r.get("est2_lhs"), r["est2_rhs"]]
                 for r in central.rows]
    fam_rows = [[i, a.ball.center, t.S_inf_l1, t.sup_est1, t.sup_est2]
                for i, (a, t) in enumerate(zip(family, tails))]
    S_const = max(t.S_inf_l1 for t in tails)
    ok = (consts.residual <= 1e-6 and max(split_res) <= 1e-4 and tent.passed
          and scaled.passed and reassembly <= 1e-8 and atom_ok
          and all(t.finite for t in tails))
    summary = {
        "constants": {"N": consts.N, "m": consts.m, "c_tail": consts.c_tail,
                      "c": list(consts.c), "residual": consts.residual},
        "calderon_max_residual": max(split_res),
        "tent_atom": {"passed": tent.passed, "margin": tent.margin},
        "pi1_scaling": mrep.factor, "pi1_branch": mrep.branch,
        "pi1_scaled_passed": scaled.passed,
        "reassembly_error": reassembly, "noncancellative_pieces": len(pieces),
        "max_piece_coefficient": max(p.coefficient for p in pieces),
        "S_inf_constant": S_const,
        "sup_est1": max(t.sup_est1 for t in tails),
        "sup_est2": max(t.sup_est2 for t in tails),
    }
    return SuiteResult("molecules", bool(ok), summary,
                       {"tail.csv": (["k", "est1_lhs", "est1_rhs", "est2_lhs", "est2_rhs"],
                                     tail_rows),
                        "atoms.csv": (["atom", "center", "S_inf_l1", "sup_est1", "sup_est2"],
                                      fam_rows)})


def suite_main(cfg, op):
    f = random_fields(op, cfg.main_fields, cfg.seed)
    norms = hardy_norms(op, f, default_grids(op, cfg.grid_ratio))
    rows = [[i, norms.H1[i], norms.h1[i], norms.ratio[i]] for i in range(f.shape[1])]
    rmax = float(np.max(norms.ratio))
    return SuiteResult("main-theorem", bool(np.isfinite(rmax)),
                       {"ratio_max": rmax, "gapped": op.gapped, "fields": cfg.main_fields},
                       {"main.csv": (["field", "H1", "h1", "ratio"], rows)})


def gap_sweep(op: SpectralOperator, shifts, fields: int, seed: int,
              grid_ratio: float = 1.02) -> list[dict]:
    """Per shift eps of ``L + eps I``: gap, fitted decay rate, lower-bound constant, max ratio."""
    rows = []
    f = random_fields(op, fields, seed)
    for eps in shifts:
        shifted = op.shifted(float(eps))
        everything = np.ones(shifted.size, dtype=bool)
        rep = gge_mod.gap_decay_fit(shifted, [(everything, everything)], _decay_times(shifted))
        norms = hardy_norms(shifted, f, default_grids(shifted, grid_ratio))
        rows.append({"eps": float(eps), "lambda0": shifted.gap, "gapped": shifted.gapped,
                     "c_lower": lower_bound_constant(shifted.gap),
                     "delta_fit": rep.constants["delta"] if shifted.gapped else None,
                     "ratio_max": float(np.max(norms.ratio))})
    return rows


def suite_sweep(cfg, op):
    rows = gap_sweep(op, cfg.sweep_shifts, cfg.main_fields, cfg.seed, cfg.grid_ratio)
    ok = all(np.isfinite(r["ratio_max"]) for r in rows)
    cols = ["eps", "lambda0", "c_lower", "delta_fit", "ratio_max"]
    return SuiteResult("gap-sweep", bool(ok),
                       {"rows": rows, "ungapped": [r["eps"] for r in rows if not r["gapped"]]},
                       {"sweep.csv": (cols, [[r[c] for c in cols] for r in rows])})


SUITES: dict[str, Callable[[ExperimentConfig, SpectralOperator], SuiteResult]] = {
    "space": suite_space,
    "op": suite_op,
    "identity": suite_identity,
    "gge": suite_gge,
    "decay": suite_decay,
    "molecules": suite_molecules,
    "main-theorem": suite_main,
    "gap-sweep": suite_sweep,
}


# --- emission ------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def emit(bundle: dict, out: str | Path, fmt: str = "json") -> list[Path]:
    """Write a report bundle: ``summary.json`` or one CSV per table, per suite subdirectory."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable") from exc
    written = []
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "passed": bundle["passed"],
               "config": bundle["config"],
               "suites": {name: {"passed": r.passed, "summary": r.summary}
                          for name, r in bundle["results"].items()}}
        path = out / "summary.json"
        path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True))
        written.append(path)
    elif fmt == "csv":
        for name, result in bundle["results"].items():
            sub = out / name
            sub.mkdir(parents=True, exist_ok=True)
            for fname, (cols, rows) in result.tables.items():
                path = sub / fname
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(cols)
                    for row in rows:
                        w.writerow([_cell(v) for v in row])
                written.append(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return written


def run_experiment(cfg: ExperimentConfig, op: SpectralOperator | None = None,
                   write: bool = True) -> dict:
    """Run the configured suites and (optionally) emit JSON and CSV reports."""
    cfg.validate()
    results: dict[str, SuiteResult] = {}
    if cfg.suites:
        if op is None:
            op = build_operator_from_config(cfg)
        if cfg.parallel and len(cfg.suites) > 1:
            with ThreadPoolExecutor() as pool:
                futures = {s: pool.submit(SUITES[s], cfg, op) for s in cfg.suites}
                results = {s: futures[s].result() for s in cfg.suites}
        else:
            for s in cfg.suites:
                log.info("running suite %s", s)
                results[s] = SUITES[s](cfg, op)
    bundle = {"config": asdict(cfg), "results": results,
              "passed": all(r.passed for r in results.values())}
    if write:
        emit(bundle, cfg.out, "json")
        emit(bundle, cfg.out, "csv")
    return bundle


def self_check(summary_path: str | Path, op: SpectralOperator, rows: int = 3,
               seed: int = 0, tol: float = 1e-10) -> float:
    """Recompute random rows of every fit report in an emitted summary; max relative gap."""
    doc = json.loads(Path(summary_path).read_text())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for suite in doc["suites"].values():
        for rep in _reports(suite["summary"]):
            if not rep["rows"]:
                continue
            for i in rng.choice(len(rep["rows"]), size=min(rows, len(rep["rows"])),
                                replace=False):
                row = rep["rows"][int(i)]
                val = gge_mod.recompute_lhs(op, rep, row)
                worst = max(worst, abs(val - row["lhs"]) / max(abs(row["lhs"]), 1e-300))
    if worst > tol:
        raise AssertionError(f"self-check mismatch {worst:.3e}")
    return worst


def _reports(summary):
    if isinstance(summary, dict):
        if "family" in summary and "rows" in summary:
            yield summary
        else:
            for v in summary.values():
                yield from _reports(v)


# --- command line --------------------------------------------------------------------

_COMMANDS = {"space": "space", "op": "op", "identity": "identity", "gge": "gge",
             "decay": "decay", "molecules": "molecules", "main": "main-theorem",
             "sweep": "gap-sweep", "run": None}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hardylab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="INI experiment config")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for random fields (u64)")
    parser.add_argument("--grid-ratio", type=float, help="geometric ratio q of the time grid")
    parser.add_argument("--parallel", action="store_true", default=None,
                        help="run suites concurrently")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        suites = None if _COMMANDS[args.command] is None else (_COMMANDS[args.command],)
        cfg = load_config(args.config, out=args.out, seed=args.seed,
                          grid_ratio=args.grid_ratio, parallel=args.parallel, suites=suites)
    except (ConfigError, TypeError) as exc:
        print(f"hardylab: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        bundle = run_experiment(cfg)
    except OSError as exc:
        print(f"hardylab: {exc}", file=sys.stderr)
        return 2
    for name, r in bundle["results"].items():
        print(f"{name:14s} {'PASS' if r.passed else 'FAIL'}")
    return 0 if bundle["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
