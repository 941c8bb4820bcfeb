"""Command-line front end.

Usage: ``capdirac <command> --config run.ini --out results/``. Commands:
spectrum, resonances, cap, compare, flow, egorov, count.

Each run writes ``<command>.jsonl`` (a timestamp header line, a summary line,
then one record per line) and ``<command>.csv`` with the same records.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dynamics import FlowError, egorov_defect, evolve_symbol, hyperbolicity_margin, nontrapping_verdict
from .harness import (
    GateConstants,
    PreconditionError,
    counting_sweep,
    run_cap_to_resonance,
    run_intersecting,
    run_resonance_to_cap,
    shared_grid,
)
from .model import (
    DistortionParam,
    ModelError,
    ModelSpec,
    PhysParams,
    SpectralBox,
    bump,
    make_bump_potential,
    make_cap,
    make_scaling_g,
    pauli_coeff,
    zero_potential,
)
from .quantize import (
    Grid,
    assemble_cap,
    assemble_distorted,
    assemble_free,
    assemble_perturbed,
    grid_for,
)
from .spectra import SolverError, box_eigenvalues, cluster, eigenvalues, identify_resonances

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PRECONDITION = 0, 2, 3, 4
COMMANDS = ("spectrum", "resonances", "cap", "compare", "flow", "egorov", "count")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the config file when known."""

    def __init__(self, msg, line=None):
        super().__init__(msg)
        self.line = line


# --- config ---------------------------------------------------------------


@dataclass
class RunConfig:
    model: ModelSpec
    experiment: str
    ladder: tuple
    grid: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    out: str = "."
    seed: int = 0
    source: object = None


class _Source:
    """Parsed config plus line lookup for diagnostics."""

    def __init__(self, text: str, name: str):
        self.name = name
        self.lines = text.splitlines()
        self.cp = configparser.ConfigParser()
        try:
            self.cp.read_string(text, source=name)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            if line is None and getattr(exc, "errors", None):
                line = exc.errors[0][0]
            raise ConfigError(str(exc).splitlines()[0], line) from None

    def line_of(self, section, key=None):
        cur = None
        for i, raw in enumerate(self.lines, 1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                cur = s[1:-1].strip()
                if key is None and cur == section:
                    return i
            elif cur == section and key is not None and "=" in s:
                if s.split("=", 1)[0].strip().lower() == key.lower():
                    return i
        return None

    def has(self, section, key=None):
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None):
        if not self.cp.has_option(section, key):
            if default is not None:
                return default
            raise ConfigError(f"missing [{section}] {key}", self.line_of(section))
        return self.cp.get(section, key)

    def floats(self, section, key, default=None, count=None):
        raw = self.raw(section, key, None if default is None else ",".join(map(str, np.atleast_1d(default))))
        try:
            vals = tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected numbers, got {raw!r}",
                              self.line_of(section, key)) from None
        if count is not None and len(vals) != count:
            raise ConfigError(f"[{section}] {key}: expected {count} values, got {len(vals)}",
                              self.line_of(section, key))
        return vals

    def float(self, section, key, default=None):
        return self.floats(section, key, default, 1)[0]


def _potential(src: _Source):
    V = zero_potential()
    if not src.has("potential"):
        return V
    for key in src.cp.options("potential"):
        if not key.startswith("bump"):
            raise ConfigError(f"[potential] unknown key {key!r}", src.line_of("potential", key))
        c, r, *coef = src.floats("potential", key)
        if len(coef) != 4:
            raise ConfigError(f"[potential] {key}: need center, radius and four Pauli coefficients",
                              src.line_of("potential", key))
        try:
            V = V + make_bump_potential(c, r, pauli_coeff(*coef))
        except ModelError as exc:
            raise ConfigError(f"[potential] {key}: {exc}", src.line_of("potential", key)) from None
    return V


def load_config(path, ladder_override=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    src = _Source(text, str(path))
    if not src.has("physics"):
        raise ConfigError("missing [physics] section")
    try:
        p = PhysParams(src.float("physics", "hbar"), src.float("physics", "mass", 1.0),
                       src.float("physics", "c", 1.0))
        cap = None
        if src.has("cap"):
            cap = make_cap(src.float("cap", "R1"), src.float("cap", "R2"), src.float("cap", "delta0"),
                           src.float("cap", "imag_ratio", 0.0),
                           src.float("cap", "dom_const") if src.has("cap", "dom_const") else None)
        g = None
        if src.has("geometry"):
            g = make_scaling_g(src.float("geometry", "R0"), src.float("geometry", "eta"))
        taus, eps = (0.15, 0.2, 0.25), 0.5
        if src.has("distortion"):
            taus = src.floats("distortion", "taus", taus)
            eps = src.float("distortion", "eps", eps)
        model = ModelSpec(p, _potential(src), cap, g, tuple(taus), eps).validate()
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    run = dict(src.cp.items("run")) if src.has("run") else {}
    grid = dict(src.cp.items("grid")) if src.has("grid") else {}
    ladder = ladder_override
    if ladder is None:
        ladder = src.floats("run", "ladder", (p.hbar,))
    if any(h <= 0 for h in ladder):
        raise ConfigError("hbar ladder entries must be positive", src.line_of("run", "ladder"))
    return RunConfig(model, run.get("experiment", ""), tuple(ladder), grid, run, source=src)


# --- helpers -----------------------------------------------------------------


def _num(rc, section, key, default=None):
    return rc.source.float(section, key, default)


def _box(rc) -> SpectralBox:
    l, r, b, t = rc.source.floats("run", "box", None, 4)
    try:
        return SpectralBox(l, r, b, t)
    except ModelError as exc:
        raise ConfigError(f"[run] box: {exc}", rc.source.line_of("run", "box")) from None


def _grid(rc, model) -> Grid:
    if "n" in rc.grid:
        return Grid(_num(rc, "grid", "half_length"), int(_num(rc, "grid", "n")))
    xi = _num(rc, "grid", "xi_max", 5.0)
    if "half_length" in rc.grid:
        return grid_for(_num(rc, "grid", "half_length"), model.params.hbar, xi)
    return shared_grid(model, xi)


def _c(z):
    return {"re": float(np.real(z)), "im": float(np.imag(z))}


def _eig_rows(values, box, hbar):
    rows = []
    vals = values if box is None else values[box.contains(values)]
    for z, mult in cluster(vals, 1e-8):
        rows.append({"hbar": hbar, **_c(z), "multiplicity": mult})
    return rows


# --- commands --------------------------------------------------------------------


def cmd_spectrum(rc):
    kind = rc.run.get("operator", "perturbed")
    box = _box(rc) if "box" in rc.run else None
    method = rc.run.get("method", "dense")
    rows = []
    for h in rc.ladder:
        m = rc.model.with_hbar(h)
        grid = _grid(rc, m)
        if kind == "free":
            op = assemble_free(grid, None, m.params)
        elif kind == "perturbed":
            op = assemble_perturbed(grid, None, m.params, m.potential)
        elif kind in ("cap", "cap_dirichlet"):
            if m.cap is None:
                raise ConfigError("operator needs a [cap] section")
            variant = "infinite" if kind == "cap" else "dirichlet"
            R = _num(rc, "run", "dirichlet_radius") if variant == "dirichlet" else None
            op = assemble_cap(grid, None, m.params, m.potential, m.cap, variant, R)
        elif kind == "distorted":
            if m.scaling is None:
                raise ConfigError("operator needs a [geometry] section")
            op = assemble_distorted(grid, None, m.params, m.potential, m.scaling,
                                    DistortionParam(1j * m.taus[0], m.eps))
        else:
            raise ConfigError(f"[run] operator: unknown kind {kind!r}",
                              rc.source.line_of("run", "operator"))
        vals = eigenvalues(op) if box is None or method == "dense" else box_eigenvalues(op, box, method)
        rows += _eig_rows(vals, box, h)
    return {"operator": kind, "count": len(rows)}, rows


def cmd_resonances(rc):
    box = _box(rc)
    method = rc.run.get("method", "arnoldi")
    rows = []
    for h in rc.ladder:
        m = rc.model.with_hbar(h)
        for r in identify_resonances(m, box, _grid(rc, m), method=method):
            rows.append(r.record())
    return {"count": len(rows)}, rows


def cmd_cap(rc):
    box = _box(rc)
    if rc.model.cap is None:
        raise ConfigError("`cap` needs a [cap] section")
    method = rc.run.get("method", "arnoldi")
    rows = []
    for h in rc.ladder:
        m = rc.model.with_hbar(h)
        J = assemble_cap(_grid(rc, m), None, m.params, m.potential, m.cap)
        rows += _eig_rows(box_eigenvalues(J, box, method), box, h)
    return {"count": len(rows)}, rows


def _gates(rc):
    g = GateConstants()
    vals = {k: _num(rc, "run", f"gate_{k}", getattr(g, k)) for k in ("C", "C0", "B", "M", "N", "K")}
    return GateConstants(**vals)


def cmd_compare(rc):
    box = _box(rc)
    m = rc.model
    if m.cap is None or m.scaling is None:
        raise ConfigError("`compare` needs [cap] and [geometry] sections")
    kw = dict(xi_max=_num(rc, "grid", "xi_max", 5.0), gates=_gates(rc),
              method=rc.run.get("method", "arnoldi"))
    if "target" in rc.run:
        kw["target"] = _num(rc, "run", "target")
    declared = rc.run.get("regime")
    if declared is not None and declared != m.regime:
        raise PreconditionError(f"declared regime {declared!r} but radii give {m.regime!r}")
    if m.regime == "intersecting":
        rep = run_intersecting(m, box, rc.ladder, seed=rc.seed, t_max=_num(rc, "run", "t_max", 20.0),
                               seeds=int(_num(rc, "run", "seeds", 1000)), **kw)
    elif rc.run.get("direction", "resonance_to_cap") == "cap_to_resonance":
        rep = run_cap_to_resonance(m, box, rc.ladder, **kw)
    else:
        rep = run_resonance_to_cap(m, box, rc.ladder, **kw)
    rows = []
    for rec in rep.records():
        extra = rec.pop("extra")
        rows.append({**rec, **{f"extra_{k}": v for k, v in extra.items()}})
    return rep.summary(), rows


def cmd_flow(rc):
    m = rc.model
    J = rc.source.floats("run", "energy", None, 2)
    R = _num(rc, "run", "radius")
    rep = nontrapping_verdict(m, J, R, _num(rc, "run", "t_max", 20.0),
                              int(_num(rc, "run", "seeds", 1000)), rc.seed,
                              inner=_num(rc, "run", "inner", 0.0))
    margin = hyperbolicity_margin(m, (-R, R), seed=rc.seed)
    rows = [{"x": x, "xi": xi, "branch": b, "direction": d} for x, xi, b, d in rep.trapped_seeds]
    summary = rep.record()
    summary["verdict"] = "nontrapping" if rep.nontrapping else "trapping"
    summary["hyperbolicity_margin"] = margin
    return summary, rows


def cmd_egorov(rc):
    m = rc.model
    cx, wx = rc.source.floats("run", "a0_x", None, 2)
    ck, wk = rc.source.floats("run", "a0_xi", None, 2)
    T = _num(rc, "run", "T", 1.0)
    steps = int(_num(rc, "run", "steps", 100))

    def a0(x, xi):
        return bump(((x - cx) / wx) ** 2) * bump(((xi - ck) / wk) ** 2)

    ev = evolve_symbol(m, a0, T, steps)
    L = _num(rc, "grid", "half_length")
    xi = _num(rc, "grid", "xi_max", 5.0)
    rows, prev = [], None
    for h in rc.ladder:
        grid = grid_for(L, h, xi)
        d = egorov_defect(m.with_hbar(h), a0, T, grid, steps=steps, evolved=ev)
        rows.append({"hbar": h, "n": grid.n, "defect": d, "ratio": None if prev is None else d / prev})
        prev = d
    return {"T": T, "steps": steps}, rows


def cmd_count(rc):
    rep = counting_sweep(rc.model, _box(rc), rc.ladder, _num(rc, "grid", "xi_max", 5.0),
                         method=rc.run.get("method", "arnoldi"))
    return rep.summary(), rep.records()


DISPATCH = {
    "spectrum": cmd_spectrum,
    "resonances": cmd_resonances,
    "cap": cmd_cap,
    "compare": cmd_compare,
    "flow": cmd_flow,
    "egorov": cmd_egorov,
    "count": cmd_count,
}


# --- output ---------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_report(out: Path, command: str, model: ModelSpec, summary: dict, rows: list):
    out.mkdir(parents=True, exist_ok=True)
    head = {"generated": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "version": __version__}
    lines = [json.dumps(head),
             json.dumps(_jsonable({"experiment": command, "model_hash": model.fingerprint(),
                                   "summary": summary}), sort_keys=True)]
    lines += [json.dumps(_jsonable(r), sort_keys=True) for r in rows]
    _atomic_write(out / f"{command}.jsonl", "\n".join(lines) + "\n")
    buf = io.StringIO()
    cols = sorted({k for r in rows for k in r})
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: json.dumps(_jsonable(r.get(k))) if isinstance(r.get(k), (list, dict))
                    else _jsonable(r.get(k)) for k in cols})
    _atomic_write(out / f"{command}.csv", buf.getvalue())


def read_report(path):
    """Inverse of write_report for the JSONL file: (header, summary, rows)."""
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), json.loads(lines[1]), [json.loads(s) for s in lines[2:]]


# --- entry point --------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="capdirac", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=".")
    ap.add_argument("--hbar-ladder", default=None, help="comma separated hbar values")
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    return ap


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("CAPDIRAC_THREADS")
    return int(env) if env else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ladder = None
        if args.hbar_ladder:
            try:
                ladder = tuple(float(v) for v in args.hbar_ladder.split(","))
            except ValueError:
                raise ConfigError(f"--hbar-ladder: cannot parse {args.hbar_ladder!r}") from None
        rc = load_config(args.config, ladder)
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        rc.seed = args.seed
        rc.out = args.out
        with threadpool_limits(_threads(args.threads)):
            summary, rows = DISPATCH[args.command](rc)
        write_report(Path(args.out), args.command, rc.model, summary, rows)
    except (ConfigError, ModelError) as exc:
        line = getattr(exc, "line", None)
        where = f"{args.config}:{line}: " if line else f"{args.config}: "
        print(f"config error: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (SolverError, FlowError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
