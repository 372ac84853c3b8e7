"""Command-line front end.

Numerical modules are imported lazily so that ``--threads`` can fix the BLAS
thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__

logger = logging.getLogger("solerwave")

SCHEMA_VERSION = 1
ENV_OUTPUT = "SOLERWAVE_OUTPUT_DIR"
ENV_THREADS = "SOLERWAVE_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_INCONSISTENT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class InputInconsistency(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"m": 1.0, "kind": "cubic", "coeffs": []},
    "grid": {"N": 400, "R_max": 40.0},
    "solver": {"r_max_shoot": 80.0, "bracket": None},
    "profile": {"omega": 0.9, "family": None},
    "spectrum": {},
    "resolvent": {"tau": 1.5, "lambdas": None, "eps_scale": 1.0, "resonance_threshold": 0.05,
                  "decay_fit": False, "wave_operator": False},
    "fgr": {"samples": 200},
    "evolve": {"T": 500.0, "dt": 0.025, "order": 4, "boundary": "absorbing", "strength": 0.2,
               "ramp": 3, "stride": 40, "perturbation": "mode", "amplitude": 1e-2, "mode": 0},
    "scan": {"omegas": [0.8, 0.85, 0.9]},
}
_TOP_LEVEL = {"seed": 0, "output_dir": None}


def _check_type(section: str, key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}")
        return type(default)(value) if isinstance(default, float) else value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"[{section}] {key}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"[{section}] {key}: expected a list, got {value!r}")
    return value


def normalize_config(raw: dict) -> dict:
    """Merge onto the defaults, rejecting unknown sections, keys and bad types."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(copy.deepcopy(_TOP_LEVEL))
    for key, value in raw.items():
        if key in _TOP_LEVEL:
            if key == "seed" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"seed: expected an integer, got {value!r}")
            cfg[key] = value
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown section [{key}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{key}] must be a table")
        for k, v in value.items():
            if k not in DEFAULTS[key]:
                raise ConfigError(f"[{key}] unknown key {k!r}")
            cfg[key][k] = _check_type(key, k, v, DEFAULTS[key][k])
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return normalize_config({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return normalize_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header(cfg: dict, command: str) -> dict:
    return {"tool": "solerwave", "tool_version": __version__, "command": command,
            "config_hash": config_hash(cfg), "seed": cfg["seed"], "schema_version": SCHEMA_VERSION}


def _jsonable(obj: Any) -> Any:
    import numpy as np

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
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path: Path, cfg: dict, command: str, body: dict) -> Path:
    doc = {"header": header(cfg, command), "schema_version": SCHEMA_VERSION, "config": cfg}
    doc.update(_jsonable(body))
    path.write_text(json.dumps(doc, indent=2))
    return path


def write_csv(path: Path, cfg: dict, command: str, columns: list[str], rows) -> Path:
    import csv

    with open(path, "w", newline="") as fh:
        for k, v in header(cfg, command).items():
            fh.write(f"# {k}: {v}\n")
        fh.write(f"# columns: {', '.join(columns)}\n")
        wr = csv.writer(fh)
        wr.writerow(columns)
        for row in rows:
            wr.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])
    return path


# ----------------------------------------------------------------------------
# shared pipeline
# ----------------------------------------------------------------------------


def _model(cfg: dict):
    from .core import SolerModel

    sec = cfg["model"]
    try:
        return SolerModel(mass=sec["m"], kind=sec["kind"], coeffs=tuple(sec["coeffs"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


def _grid(cfg: dict):
    from .core import RadialGrid

    try:
        return RadialGrid(int(cfg["grid"]["N"]), float(cfg["grid"]["R_max"]))
    except ValueError as exc:
        raise ConfigError(f"[grid]: {exc}") from exc


def _bracket(cfg: dict):
    b = cfg["solver"]["bracket"]
    if b is None:
        return None
    if len(b) != 2:
        raise ConfigError("[solver] bracket must have two entries")
    return float(b[0]), float(b[1])


def _profile(cfg: dict, omega: float):
    from .profile import solve_profile

    return solve_profile(_model(cfg), omega, _bracket(cfg), r_max=max(cfg["solver"]["r_max_shoot"],
                                                                       cfg["grid"]["R_max"]))


def _operator(cfg: dict, omega: float):
    from .linop import assemble_linearized, discrete_spectrum
    from .profile import polish_profile

    model = _model(cfg)
    prof = _profile(cfg, omega)
    disc = polish_profile(prof, model, _grid(cfg))
    L = assemble_linearized(disc, model)
    return model, prof, disc, L, discrete_spectrum(L)


def _out_dir(args, cfg: dict) -> Path:
    d = args.out or os.environ.get(ENV_OUTPUT) or cfg.get("output_dir") or "solerwave-out"
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _omega(args, cfg: dict) -> float:
    return float(args.omega if getattr(args, "omega", None) is not None else cfg["profile"]["omega"])


def parse_family(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(s) for s in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"family must be lo:hi:step, got {spec!r}") from exc
    if step <= 0 or hi < lo:
        raise ConfigError("family needs step > 0 and hi >= lo")
    n = int(round((hi - lo) / step))
    return [lo + i * step for i in range(n + 1)]


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_profile(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    model = _model(cfg)
    family = args.family or cfg["profile"]["family"]
    if family:
        from .profile import continue_family

        omegas = parse_family(family) if isinstance(family, str) else [float(w) for w in family]
        fam = continue_family(model, omegas, _bracket(cfg), r_max=cfg["solver"]["r_max_shoot"])
        qp = dict(zip(fam.qprime_omegas.tolist(), fam.qprime.tolist()))
        write_csv(out / "family.csv", cfg, "profile", ["omega", "q", "qprime"],
                  [(w, q, qp.get(w, float("nan"))) for w, q in zip(fam.omegas, fam.q)])
        write_json(out / "family.json", cfg, "profile",
                   {"omegas": fam.omegas, "q": fam.q, "qprime": fam.qprime, "failure": fam.failure,
                    "verdicts": {"H3": fam.h3_verdict()}})
        print(f"family: {len(fam.omegas)} members, H3 {fam.h3_verdict()['verdict']}")
        return EXIT_NUMERICAL if fam.failure else EXIT_OK
    import numpy as np

    from .profile import profile_residual

    omega = _omega(args, cfg)
    prof = _profile(cfg, omega)
    radial, cartesian = profile_residual(prof, model, rng=np.random.default_rng(cfg["seed"]))

    rho = np.linspace(0.0, min(cfg["grid"]["R_max"], prof.match_radius * 2), 801)
    a, b = prof(rho)
    write_csv(out / "profile.csv", cfg, "profile", ["rho", "a", "b"], zip(rho, a, b))
    body = prof.to_dict()
    body.update(residual_radial=radial, residual_cartesian=cartesian,
                decay_rate_exact=prof.kappa_exact,
                verdicts={"H1": {"g0": float(model.g(0.0)), "holds": float(model.g(0.0)) == 0.0},
                          "H2": {"holds": bool(prof.nodeless and max(radial, cartesian) < 1e-6),
                                 "nodeless": prof.nodeless, "residual": max(radial, cartesian)}})
    write_json(out / "profile.json", cfg, "profile", body)
    print(f"profile omega={omega}: a0={prof.a0:.12g} residual={max(radial, cartesian):.2e}")
    return EXIT_OK


def cmd_spectrum(args, cfg: dict) -> int:
    from .linop import generalized_kernel_check, kernel_residual, symmetry_check

    out = _out_dir(args, cfg)
    omega = _omega(args, cfg)
    model, prof, disc, L, S = _operator(cfg, omega)
    body = S.to_dict()
    body["symmetry"] = symmetry_check(L, S, seed=cfg["seed"])
    body["kernel"] = {"residual": kernel_residual(L), **generalized_kernel_check(L, spectrum=S)}
    body["profile_residual"] = disc.residual
    write_json(out / "spectrum.json", cfg, "spectrum", body)
    print(f"spectrum omega={omega}: eigenvalues {S.eigenvalues.tolist()} kernel dim {len(S.zero_cluster)}")
    return EXIT_OK


def cmd_resolvent(args, cfg: dict) -> int:
    import numpy as np

    from .resolvent import FreePropagator, decay_fit, inverse_pair_check, lap_bound_scan, threshold_resonance_scan

    out = _out_dir(args, cfg)
    sec = cfg["resolvent"]
    omega = _omega(args, cfg)
    model, prof, disc, L, S = _operator(cfg, omega)
    gap = L.gap
    lambdas = sec["lambdas"] or list(np.linspace(1.1 * gap, 2 * model.mass, 8))
    lap = lap_bound_scan(L, S, lambdas, tau=sec["tau"], eps_scale=sec["eps_scale"])
    lap_fine = lap_bound_scan(L, S, lambdas, tau=sec["tau"], eps_scale=0.5 * sec["eps_scale"])
    norms, fine = np.asarray(lap["norms"]), np.asarray(lap_fine["norms"])
    stable = bool(np.all(np.abs(fine - norms) <= 0.3 * np.abs(norms)))
    write_csv(out / "lap.csv", cfg, "resolvent", ["lambda", "norm", "norm_half_eps"], zip(lambdas, norms, fine))
    scan = threshold_resonance_scan(L, tau=sec["tau"], resonance_threshold=sec["resonance_threshold"])
    body = {"omega": omega, "lap": {"lambdas": lambdas, "norms": norms, "norms_half_eps": fine,
                                    "sup": lap["sup"], "refinement_stable": stable},
            "thresholds": scan,
            "verdicts": {"H7": {"holds": all(v["verdict"] == "no resonance" for v in scan.values()),
                                "detail": {k: v["verdict"] for k, v in scan.items()}},
                         "H8": {"lap_finite": bool(np.all(np.isfinite(norms))), "refinement_stable": stable,
                                "tau": sec["tau"]}}}
    if sec["decay_fit"]:
        rho = np.concatenate([L.grid.rho, L.grid.rho])
        psi = np.exp(-rho**2 / 4).astype(complex)
        prop = FreePropagator(L.grid, model, omega)
        t_max = L.grid.r_max * 0.7
        body["decay_fit"] = decay_fit(prop, psi, sec["tau"], np.linspace(0.2 * t_max, t_max, 20))
    if sec["wave_operator"]:
        from .linop import spectral_projection

        rng = np.random.default_rng(cfg["seed"])
        rho = np.concatenate([L.grid.rho, L.grid.rho])
        v = spectral_projection(S, (rng.normal(size=L.size) + 1j * rng.normal(size=L.size))
                                * np.exp(-rho**2 / 8)).f
        body["wave_operator"] = inverse_pair_check(L, v, S)
    write_json(out / "resolvent.json", cfg, "resolvent", body)
    print(f"resolvent omega={omega}: LAP sup {lap['sup']:.4g}, H7 {body['verdicts']['H7']['holds']}")
    return EXIT_OK


def cmd_fgr(args, cfg: dict) -> int:
    import numpy as np

    from .fgr import coupling_vectors, fgr_check

    out = _out_dir(args, cfg)
    omega = _omega(args, cfg)
    model, prof, disc, L, S = _operator(cfg, omega)
    C = coupling_vectors(disc, model, S, seed=cfg["seed"])
    report = fgr_check(L, S, C, samples=cfg["fgr"]["samples"], seed=cfg["seed"])
    nd = report.get("nondegeneracy", {})
    couplings = {f"{mu}|{nu}": {"re": np.real(C.vector(mu, nu)), "im": np.imag(C.vector(mu, nu))}
                 for mu, nu in C.indices}
    write_json(out / "couplings.json", cfg, "fgr",
               {"omega": omega, "lambdas": C.lambdas, "symmetry_residual": C.symmetry_residual,
                "oracle_residual": C.oracle_residual, "vectors": couplings})
    body = {"omega": omega, "report": report,
            "verdicts": {"H9": {"holds": nd.get("multiplicity_holds"), "N": nd.get("N")},
                         "H10": {"holds": nd.get("threshold_combinations_hold")},
                         "H11": {"holds": nd.get("independence_holds")},
                         "H12": {"verdict": report["verdict"], "order": "leading"}}}
    write_json(out / "fgr.json", cfg, "fgr", body)
    print(f"fgr omega={omega}: H12 {report['verdict']}")
    return EXIT_OK


def cmd_evolve(args, cfg: dict) -> int:
    from .dynamics import EvolutionOptions, stability_experiment

    out = _out_dir(args, cfg)
    sec = cfg["evolve"]
    omega = _omega(args, cfg)
    T = float(args.T if args.T is not None else sec["T"])
    model, prof, disc, L, S = _operator(cfg, omega)
    try:
        opts = EvolutionOptions(dt=sec["dt"], order=sec["order"], boundary=sec["boundary"],
                                strength=sec["strength"], ramp=sec["ramp"], stride=sec["stride"])
    except ValueError as exc:
        raise ConfigError(f"[evolve]: {exc}") from exc
    pert = {"kind": sec["perturbation"], "amplitude": sec["amplitude"], "mode": sec["mode"], "seed": cfg["seed"]}
    res = stability_experiment(disc, model, S, pert, T, opts)
    res["track"].to_csv(out / "track.csv", header=header(cfg, "evolve"))
    write_json(out / "evolve.json", cfg, "evolve", {"omega": omega, "report": res["report"]})
    print(f"evolve omega={omega} T={T}: {res['report']['verdict']['verdict']}")
    return EXIT_OK


def _scan_point(payload: tuple) -> dict:
    cfg, omega = payload
    model, prof, disc, L, S = _operator(cfg, omega)
    return {"omega": omega, "a0": prof.a0, "q": disc.charge(), "eigenvalues": S.eigenvalues.tolist(),
            "kernel_dim": len(S.zero_cluster), "stable_candidate": S.linearly_stable_candidate}


def cmd_scan(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    omegas = [float(w) for w in cfg["scan"]["omegas"]]
    threads = _threads(args)
    payloads = [(cfg, w) for w in omegas]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_scan_point, payloads))
    else:
        rows = [_scan_point(p) for p in payloads]
    write_csv(out / "scan.csv", cfg, "scan", ["omega", "a0", "q", "n_eigenvalues", "lambda_min", "kernel_dim"],
              [(r["omega"], r["a0"], r["q"], len(r["eigenvalues"]),
                min(r["eigenvalues"]) if r["eigenvalues"] else float("nan"), r["kernel_dim"]) for r in rows])
    write_json(out / "scan.json", cfg, "scan", {"points": rows})
    print(f"scan: {len(rows)} points")
    return EXIT_OK


HYPOTHESES = {
    "H1": ("profile", "H1"), "H2": ("profile", "H2"), "H3": ("family", "H3"),
    "H4": ("spectrum", None), "H5": ("spectrum", None), "H6": ("spectrum", None),
    "H7": ("resolvent", "H7"), "H8": ("resolvent", "H8"),
    "H9": ("fgr", "H9"), "H10": ("fgr", "H10"), "H11": ("fgr", "H11"), "H12": ("fgr", "H12"),
}


def build_dashboard(docs: dict[str, tuple[str, dict]]) -> dict:
    """One line per hypothesis from loaded output documents keyed by kind."""
    omegas = {kind: doc.get("omega", doc.get("config", {}).get("profile", {}).get("omega"))
              for kind, (_, doc) in docs.items() if kind != "family"}
    values = {round(float(w), 12) for w in omegas.values() if w is not None}
    if len(values) > 1:
        raise InputInconsistency(f"inputs disagree on omega: {omegas}")
    lines = {}
    for h, (kind, key) in HYPOTHESES.items():
        if kind not in docs:
            lines[h] = {"status": "not evaluated", "evidence": None}
            continue
        path, doc = docs[kind]
        if kind == "spectrum":
            v = doc.get("verdicts", {})
            if h == "H4":
                sym = doc.get("symmetry", {})
                val = {"sector_A_residual": sym.get("sector_A_residual"),
                       "sector_B_residual": sym.get("sector_B_residual")}
            elif h == "H5":
                val = {"kernel_dimension": v.get("H5_kernel_dimension"),
                       "holds": v.get("H5_kernel_dimension") == 2}
            else:
                val = {k: v.get(k) for k in ("H6_count_2n", "H6_inside_gap", "H6_threshold_suspect",
                                             "H6_coverage_caveat", "signatures", "linear_stability_candidate")}
        else:
            val = doc.get("verdicts", {}).get(key)
        if val is None:
            lines[h] = {"status": "not evaluated", "evidence": path}
            continue
        if "holds" in val:
            status = "holds" if val["holds"] else "violated"
        elif "verdict" in val:
            status = str(val["verdict"])
        else:
            status = "reported"
        lines[h] = {"status": status, "detail": val, "evidence": path}
    return {"omega": next(iter(values)) if values else None, "hypotheses": lines}


def cmd_report(args, cfg: dict) -> int:
    out = _out_dir(args, cfg)
    docs: dict[str, tuple[str, dict]] = {}
    for p in args.paths:
        try:
            doc = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report input {p}: {exc}") from exc
        kind = doc.get("header", {}).get("command")
        stem = Path(p).stem
        if kind == "profile" and stem == "family":
            kind = "family"
        if kind not in {"profile", "family", "spectrum", "resolvent", "fgr", "evolve"}:
            raise InputInconsistency(f"{p} is not a solerwave output file")
        docs[kind] = (str(p), doc)
    dash = build_dashboard(docs)
    write_json(out / "dashboard.json", cfg, "report", dash)
    text = [f"solerwave {__version__} hypothesis dashboard, omega = {dash['omega']}"]
    for h, line in dash["hypotheses"].items():
        text.append(f"{h:>4}: {line['status']:<16} {line['evidence'] or ''}")
    (out / "dashboard.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def _threads(args) -> int:
    t = getattr(args, "threads", None) or os.environ.get(ENV_THREADS) or 1
    try:
        t = int(t)
    except ValueError as exc:
        raise ConfigError(f"thread count must be an integer, got {t!r}") from exc
    if t < 1:
        raise ConfigError("thread count must be >= 1")
    return t


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solerwave", description="Soler standing waves: profiles, spectra, "
                                     "resolvent scans, golden-rule checks and dynamics.")
    parser.add_argument("--version", action="version", version=f"solerwave {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON configuration file")
    common.add_argument("--out", help=f"output directory (env {ENV_OUTPUT})")
    common.add_argument("--threads", type=int, help=f"worker and BLAS threads (env {ENV_THREADS}); 1 is bit-exact")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [("profile", cmd_profile), ("spectrum", cmd_spectrum), ("resolvent", cmd_resolvent),
                     ("fgr", cmd_fgr), ("evolve", cmd_evolve), ("scan", cmd_scan)]:
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(func=fn)
        if name != "scan":
            p.add_argument("--omega", type=float)
    sub.choices["profile"].add_argument("--family", help="lo:hi:step continuation grid")
    sub.choices["evolve"].add_argument("--T", type=float, help="final time")
    rep = sub.add_parser("report", parents=[common])
    rep.add_argument("paths", nargs="+", help="JSON outputs of the other commands")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None or ENV_THREADS in os.environ:
            threads = str(_threads(args))
            for var in _THREAD_VARS:
                os.environ[var] = threads
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputInconsistency as exc:
        print(f"inconsistent inputs: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except (RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
