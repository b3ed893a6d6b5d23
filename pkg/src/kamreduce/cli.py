"""Command line front end: reduce, screen, verify, report and selfcheck.

Configuration is TOML (see README for the keys).  Outputs are JSON reports
(schema versioned, floats written with 17 significant digits), CSV tables
and a little-endian binary dump of the final normal form and stored maps.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import struct
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path


def _early_threads(argv):
    """Thread count for the BLAS pools; must run before numpy is imported."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is None:
        n = os.environ.get("KAMREDUCE_THREADS")
    if n is not None and str(n).isdigit() and int(n) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(int(n)))
    return n


_early_threads(sys.argv[1:])

import numpy as np  # noqa: E402

try:  # noqa: E402
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__  # noqa: E402
from .kam_core import (  # noqa: E402
    ContractionFailure,
    FlowMap,
    InvalidParams,
    IterState,
    NonHermitianAverage,
    NormalForm,
    NormSpec,
    brute_force_block,
    homological_residual,
    initial_state,
    kam_iterate,
    kron_block,
    make_schedule,
    picard_flow,
    solve_homological,
)
from .linear_hamiltonian import SeriesDivergence, doubling_form, expm_series  # noqa: E402
from .resonance import ResonanceHit, diophantine_check, measure_estimate, screen_frequency  # noqa: E402
from .torus_fourier import (  # noqa: E402
    NoConvergence,
    NotADiffeo,
    SmallDivisor,
    StripOverflow,
    TorusSeries,
)
from .verify import (  # noqa: E402
    LinearField,
    assemble_original,
    conjugacy_residual,
    energy_drift,
    integrate,
    lyapunov_estimate,
    sobolev_ratio,
    spectrum_report,
)
from .wave_model import DegeneratePotential, ModelParams, RTriple, QPBlockOperator, prepare  # noqa: E402

SCHEMA_VERSION = 1
DUMP_VERSION = 1
MAGIC = b"KAMR"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_RESONANCE = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5


class ConfigError(ValueError):
    pass


class ArtifactMismatch(ValueError):
    pass


DEFAULTS = {
    "model": {"n": 1, "M": 1.0, "eps": 1e-3, "gamma": 1e-2, "N": 8, "J": 8,
              "omega": [1.3], "omega_seed": 0, "theta_cutoff": 32, "galerkin_norm": 2 * math.pi},
    "potential": {"V0": {"preset": "cos", "amplitude": 1.0},
                  "V": {"preset": "cos_x_cos_theta", "amplitude": 2.0, "x_mode": 1}},
    "schedule": {"nu_max": 4, "K_cap": 32, "norm_index": 0.0, "screen": True},
    "screen": {"samples": 10000, "gamma_list": [1e-4, 1e-3, 1e-2], "seed": 0, "K": 8},
    "verify": {"T": 1000.0, "dt": 0.012, "renorm": 1.0, "theta_samples": 16,
               "sobolev_N": [0, 4], "seed": 0},
    "output": {"directory": "kamreduce-out", "formats": ["json", "csv", "bin"]},
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {path}{k}")
        if isinstance(base[k], dict) and k not in ("V0", "V"):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be a table")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, text: str | None = None) -> dict:
    """Parse a TOML config and fill in defaults; raises ConfigError."""
    if text is None and path is None:
        raw = {}
    else:
        try:
            if text is None:
                text = Path(path).read_text(encoding="utf-8")
            raw = tomllib.loads(text)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    m = cfg["model"]
    if m["omega"] == "draw":
        # omega ~ U[1, 2]^n from the seed; the drawn value is what gets hashed
        if not isinstance(m["omega_seed"], int) or not isinstance(m["n"], int) or m["n"] < 1:
            raise ConfigError("model.omega = 'draw' needs integer model.n and model.omega_seed")
        m["omega"] = np.random.default_rng(m["omega_seed"]).uniform(1.0, 2.0, m["n"]).tolist()
    _validate(cfg)
    return cfg


def _validate(cfg):
    m, s, sc, v = cfg["model"], cfg["schedule"], cfg["screen"], cfg["verify"]
    for key, typ in (("n", int), ("N", int), ("J", int), ("theta_cutoff", int)):
        if not isinstance(m[key], typ) or isinstance(m[key], bool):
            raise ConfigError(f"model.{key} must be an integer")
    for key in ("M", "eps", "gamma", "galerkin_norm"):
        if not isinstance(m[key], (int, float)) or isinstance(m[key], bool):
            raise ConfigError(f"model.{key} must be a number")
    if isinstance(m["omega"], (int, float)):
        m["omega"] = [float(m["omega"])]
    if not isinstance(m["omega"], list) or len(m["omega"]) != m["n"]:
        raise ConfigError("model.omega must be a list of n numbers")
    if not isinstance(s["nu_max"], int) or s["nu_max"] < 0:
        raise ConfigError("schedule.nu_max must be a nonnegative integer")
    if not isinstance(s["K_cap"], int) or s["K_cap"] < 1:
        raise ConfigError("schedule.K_cap must be a positive integer")
    if not isinstance(sc["samples"], int) or sc["samples"] < 1:
        raise ConfigError("screen.samples must be a positive integer")
    if not sc["gamma_list"] or any(not 0 < g < 1 for g in sc["gamma_list"]):
        raise ConfigError("screen.gamma_list must hold numbers in (0, 1)")
    for key in ("T", "dt", "renorm"):
        if not v[key] > 0:
            raise ConfigError(f"verify.{key} must be positive")
    for name in ("V0", "V"):
        _potential_table(cfg["potential"][name], m["n"], name)


_V0_PRESETS = ("zero", "cos", "sin")
_V_PRESETS = ("zero", "cos_x", "cos_x_cos_theta")


def _theta_mode(spec, n):
    mode = spec.get("mode", [1] + [0] * (n - 1))
    if len(mode) != n or not all(isinstance(x, int) for x in mode):
        raise ConfigError("potential mode must be a list of n integers")
    return tuple(mode)


def _potential_table(spec, n, name):
    """{x-mode: {theta-mode: coefficient}} for V, {theta-mode: coefficient} for V0."""
    if not isinstance(spec, dict):
        raise ConfigError(f"potential.{name} must be a table")
    if "table" in spec:
        out = {}
        for row in spec["table"]:
            k = tuple(row.get("k", [0] * n))
            if len(k) != n:
                raise ConfigError(f"potential.{name}: k must have n entries")
            c = complex(row.get("re", 0.0), row.get("im", 0.0))
            if name == "V0":
                out[k] = out.get(k, 0) + c
            else:
                x = int(row.get("x", 0))
                out.setdefault(x, {})
                out[x][k] = out[x].get(k, 0) + c
        return out
    preset = spec.get("preset")
    amp = float(spec.get("amplitude", 1.0))
    presets = _V0_PRESETS if name == "V0" else _V_PRESETS
    if preset not in presets:
        raise ConfigError(f"potential.{name}: unknown preset {preset!r} (known: {', '.join(presets)})")
    k = _theta_mode(spec, n)
    neg = tuple(-x for x in k)
    zero = (0,) * n
    if name == "V0":
        if preset == "zero":
            return {}
        if preset == "cos":
            return {k: amp / 2, neg: amp / 2}
        return {k: amp / 2j, neg: -amp / 2j}
    if preset == "zero":
        return {}
    x = int(spec.get("x_mode", 1))
    if preset == "cos_x":
        return {x: {zero: amp / 2}, -x: {zero: amp / 2}}
    return {x: {k: amp / 4, neg: amp / 4}, -x: {k: amp / 4, neg: amp / 4}}


def build_params(cfg) -> ModelParams:
    m = cfg["model"]
    n = m["n"]
    V0t = _potential_table(cfg["potential"]["V0"], n, "V0")
    V0 = TorusSeries.from_modes(V0t, n) if V0t else TorusSeries.zeros(n, 0)
    Vt = _potential_table(cfg["potential"]["V"], n, "V")
    Vmodes = {x: TorusSeries.from_modes(t, n) for x, t in Vt.items()}
    if not Vmodes:
        Vmodes = {0: TorusSeries.zeros(n, 0)}
    try:
        return ModelParams(n=n, M=float(m["M"]), eps=float(m["eps"]), gamma=float(m["gamma"]),
                           N=m["N"], J=m["J"], V0=V0, Vmodes=Vmodes, omega=m["omega"],
                           theta_cutoff=m["theta_cutoff"], galerkin_norm=float(m["galerkin_norm"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# serialization


def _num(x):
    if isinstance(x, bool) or x is None:
        return x
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else None


def canonical(obj):
    """Plain JSON-ready structure (numpy scalars and arrays converted)."""
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return canonical(obj.tolist())
    if isinstance(obj, complex):
        return {"re": _num(obj.real), "im": _num(obj.imag)}
    if isinstance(obj, (str, bool)) or obj is None:
        return obj
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return _num(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(obj, indent: int | None = 1) -> str:
    """JSON text with every float written to 17 significant digits."""
    obj = canonical(obj)
    buf = io.StringIO()

    def emit(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        if isinstance(o, dict):
            if not o:
                buf.write("{}")
                return
            buf.write("{")
            for i, k in enumerate(sorted(o)):
                buf.write(("," if i else "") + pad + json.dumps(k) + ": ")
                emit(o[k], level + 1)
            buf.write(end + "}")
        elif isinstance(o, list):
            if not o:
                buf.write("[]")
                return
            buf.write("[")
            for i, v in enumerate(o):
                buf.write(("," if i else "") + pad)
                emit(v, level + 1)
            buf.write(end + "]")
        elif isinstance(o, float):
            buf.write(format(o, ".17g"))
        else:
            buf.write(json.dumps(o))

    emit(obj, 0)
    return buf.getvalue() + ("\n" if indent is not None else "")


def content_hash(obj) -> str:
    return hashlib.sha256(dump_json(obj, indent=None).encode()).hexdigest()


def config_hash(cfg) -> str:
    """Hash of everything that affects numbers (output settings excluded)."""
    return content_hash({k: v for k, v in cfg.items() if k != "output"})


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(x, ".17g") if isinstance(x, float) else x for x in r])


def _table_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        code, data = 2, arr.astype("<c16")
    else:
        code, data = 1, arr.astype("<f8")
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    raw = data.tobytes(order="C")
    return head + struct.pack("<Q", len(raw)) + raw


def write_dump(path, tables: list) -> str:
    """Write [(name, array), ...]; returns the sha256 of the file."""
    out = MAGIC + struct.pack("<II", DUMP_VERSION, len(tables))
    out += b"".join(_table_bytes(n, a) for n, a in tables)
    Path(path).write_bytes(out)
    return hashlib.sha256(out).hexdigest()


def read_dump(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ArtifactMismatch("bad magic bytes")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DUMP_VERSION:
        raise ArtifactMismatch(f"unsupported dump version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + ln].decode()
            pos += ln
            code, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            dt = {1: "<f8", 2: "<c16"}[code]
            out[name] = np.frombuffer(raw[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise ArtifactMismatch(f"corrupt dump: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Reduction:
    params: ModelParams
    prepared: object
    schedule: object
    state: IterState
    reports: list
    norms: NormSpec
    timings: dict = field(default_factory=dict)

    @property
    def r_final(self) -> float:
        if not self.reports:
            return 0.0
        return float(self.reports[-1].r_next)


def _screen_hook(omega, n, J):
    def hook(nu, nf, K, gamma):
        v = screen_frequency(omega, nf, K, gamma, n, J)
        if not v.passed:
            k, i, j, l, fam, div, floor = v.offending[0]
            raise ResonanceHit(tuple(int(x) for x in np.atleast_1d(k)), int(i), int(j), int(l),
                               float(div), float(floor), fam)
        return v.as_dict()
    return hook


def run_reduction(p: ModelParams, nu_max: int = 4, K_cap: int = 32, norm_index: float = 0.0,
                  screen: bool = True, seed: int = 0) -> Reduction:
    """Steps 1-3, b0 elimination, layer split and the KAM iteration."""
    t0 = time.perf_counter()
    pm = prepare(p)
    t1 = time.perf_counter()
    norms = NormSpec(p.M, norm_index)
    J = p.J
    if p.eps == 0 or nu_max == 0:
        nf = NormalForm.unperturbed(pm.rho, p.M, J)
        zero = TorusSeries.zeros(p.n, 0, shape=(2 * (2 * J + 1),) * 2, real_valued=False)
        state = IterState(0, nf, {0: pm.killed.field if p.eps else zero}, ())
        return Reduction(p, pm, None, state, [], norms,
                         {"prepare_ms": 1e3 * (t1 - t0), "iterate_ms": 0.0})
    sch = make_schedule(p.eps, p.N, p.gamma, nu_max, K_cap)
    state = initial_state(pm.killed.field, pm.rho, p.M, J, sch)
    hook = _screen_hook(p.omega, p.n, J) if screen else None
    state, reports = kam_iterate(state, sch, p.omega, p.n, screen=hook, norms=norms, seed=seed)
    t2 = time.perf_counter()
    return Reduction(p, pm, sch, state, reports, norms,
                     {"prepare_ms": 1e3 * (t1 - t0), "iterate_ms": 1e3 * (t2 - t1)})


def _step_dict(r):
    d = {k: getattr(r, k) for k in ("nu", "r_nu", "r_next", "min_divisor_margin", "K_used",
                                     "P_norm", "P_bound", "symplectic_defect",
                                     "homological_residual", "normal_form_asymmetry",
                                     "series_terms", "budget_ratio")}
    if r.screen is not None:
        d["screen_min_margin"] = r.screen.get("min_margin")
    return d


def reduction_result(red: Reduction) -> dict:
    p, pm, nf = red.params, red.prepared, red.state.normal_form
    lam = p.lam
    sp = spectrum_report(nf.blocks, pm.rho, lam, p.eps)
    dioph = diophantine_check(p.omega, p.gamma, p.tau, red.schedule.K_cap if red.schedule else 32)
    res = {
        "status": "ok",
        "rho": pm.rho,
        "omega": p.omega,
        "steps": [_step_dict(r) for r in red.reports],
        "r_final": red.r_final,
        "normal_form": {"blocks": [b for b in nf.blocks], "shift": [s for s in nf.shift]},
        "spectrum": sp.as_dict(),
        "diophantine": {"passed": dioph.passed, "min_margin": dioph.min_margin, "argmin_k": dioph.argmin_k},
        "preparation": {"step3_identity_residual": pm.reparam.identity_residual,
                        "diffeo_roundtrip": pm.reparam.diffeo.roundtrip_defect(),
                        "b0_eliminated": not pm.killed.identity},
        "transforms": len(red.state.transform_log),
    }
    if red.schedule is not None:
        s = red.schedule
        res["schedule"] = {"eps_seq": s.eps_seq, "strip_seq": s.strip_seq, "trunc_seq": s.trunc_seq,
                           "gamma_seq": s.gamma_seq, "cap_applied": list(s.cap_applied)}
    return res


def dump_tables(red: Reduction) -> list:
    nf = red.state.normal_form
    tables = [("rho", np.array([red.prepared.rho])), ("omega", red.params.omega),
              ("lambda_base", nf.dense_base()), ("lambda_shift", nf.dense_shift())]
    for m, fl in enumerate(red.state.transform_log):
        tables.append((f"eps_{m}", np.array([fl.eps])))
        tables.append((f"P_{m}", fl.P.coeffs))
    return tables


def load_transforms(tables: dict, n: int, J: int):
    """(NormalForm, [FlowMap]) from a dump."""
    base, shift = tables["lambda_base"], tables["lambda_shift"]
    from .wave_model import block_slice

    bl = [base[block_slice(j), block_slice(j)] for j in range(J + 1)]
    sh = [shift[block_slice(j), block_slice(j)] for j in range(J + 1)]
    rho = float(tables["rho"][0])
    nf = NormalForm([b + s for b, s in zip(bl, sh)], rho, [], bl, sh)
    maps = []
    m = 0
    while f"P_{m}" in tables:
        c = tables[f"P_{m}"]
        K = (c.shape[0] - 1) // 2
        maps.append(FlowMap(TorusSeries(c, n, K), None, float(tables[f"eps_{m}"][0]), 0))
        m += 1
    return nf, maps


# ---------------------------------------------------------------------------
# commands


def _apply_overrides(cfg, args):
    if getattr(args, "nu_max", None) is not None:
        cfg["schedule"]["nu_max"] = args.nu_max
    if getattr(args, "k_cap", None) is not None:
        cfg["schedule"]["K_cap"] = args.k_cap
    if getattr(args, "seed", None) is not None:
        cfg["screen"]["seed"] = args.seed
        cfg["verify"]["seed"] = args.seed
    _validate(cfg)
    return cfg


def _outdir(cfg, args) -> Path:
    d = Path(args.out) if getattr(args, "out", None) else Path(cfg["output"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _header(cfg, kind):
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "version": __version__,
            "config_hash": config_hash(cfg), "config": cfg}


def cmd_reduce(cfg, out: Path, log=print) -> int:
    p = build_params(cfg)
    s = cfg["schedule"]
    head = _header(cfg, "reduce")
    try:
        red = run_reduction(p, s["nu_max"], s["K_cap"], float(s["norm_index"]), bool(s["screen"]),
                            cfg["verify"]["seed"])
    except (ResonanceHit, SmallDivisor) as exc:
        cert = exc.certificate() if isinstance(exc, ResonanceHit) else \
            {"k": list(np.atleast_1d(exc.k)), "divisor": exc.value, "floor": exc.floor, "family": "diophantine"}
        doc = dict(head, result={"status": "resonance", "certificate": cert, "message": str(exc)})
        (out / "certificate.json").write_text(dump_json(doc), encoding="utf-8")
        log(f"resonance: {exc}")
        return EXIT_RESONANCE
    except (SeriesDivergence, ContractionFailure, NoConvergence, NonHermitianAverage,
            StripOverflow, NotADiffeo, FloatingPointError) as exc:
        doc = dict(head, result={"status": "divergence", "message": str(exc)})
        (out / "report.json").write_text(dump_json(doc), encoding="utf-8")
        log(f"numeric divergence: {exc}")
        return EXIT_DIVERGENCE
    except (InvalidParams, DegeneratePotential) as exc:
        raise ConfigError(str(exc)) from exc
    result = reduction_result(red)
    fmts = cfg["output"]["formats"]
    artifacts = {}
    if "bin" in fmts:
        artifacts["transforms"] = "transforms.kamr"
        artifacts["transforms_sha256"] = write_dump(out / "transforms.kamr", dump_tables(red))
    if "csv" in fmts:
        write_csv(out / "steps.csv", ["nu", "r_nu", "min_divisor_margin", "K_used", "wall_ms"],
                  [[r.nu, r.r_nu, r.min_divisor_margin, r.K_used, r.wall_ms] for r in red.reports])
        artifacts["steps_csv"] = "steps.csv"
    timings = dict(red.timings, step_ms=[r.wall_ms for r in red.reports])
    doc = dict(head, result=result, result_hash=content_hash(result), artifacts=artifacts,
               timings=timings)
    (out / "report.json").write_text(dump_json(doc), encoding="utf-8")
    log(f"reduced in {len(red.reports)} steps, r_final = {red.r_final:.3e}; report in {out}")
    return EXIT_OK


def cmd_screen(cfg, out: Path, log=print) -> int:
    m, sc = cfg["model"], cfg["screen"]
    try:
        rep = measure_estimate(sc["gamma_list"], m["n"], float(m["M"]), float(m["eps"]), m["J"],
                               sc["K"], sc["samples"], sc["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = [[g, f, rep.slope, rep.ci[0], rep.ci[1]] for g, f in zip(rep.gammas, rep.fractions)]
    write_csv(out / "screen.csv", ["gamma", "excluded_fraction", "fit_slope", "ci_lo", "ci_hi"], rows)
    doc = dict(_header(cfg, "screen"), result={"gammas": rep.gammas, "fractions": rep.fractions,
                                               "slope": rep.slope, "ci": rep.ci,
                                               "samples": rep.samples, "seed": rep.seed})
    (out / "screen.json").write_text(dump_json(doc), encoding="utf-8")
    log(f"excluded fractions {rep.fractions}, slope {rep.slope:.3f}")
    return EXIT_OK


def _artifact_paths(path: Path):
    path = Path(path)
    if path.is_dir():
        return path / "report.json", path
    return path, path.parent


def verification_metrics(p: ModelParams, nf: NormalForm, maps, prepared, v: dict, r_final: float,
                         series_out=None) -> dict:
    """Integrator gates, Lyapunov, Sobolev ratios, conjugacy defect and spectrum."""
    T, dt, renorm = float(v["T"]), float(v["dt"]), float(v["renorm"])
    rng = np.random.default_rng(v["seed"])
    Ns = sorted(set(int(x) for x in v["sobolev_N"]) | {int(p.N)})
    d = 2 * p.J + 1
    z0 = rng.normal(size=2 * d) + 1j * rng.normal(size=2 * d)
    # eps = 0 gates on the same truncation
    from dataclasses import replace

    p0 = replace(p, eps=0.0)
    f0 = assemble_original(p0, "post-step3")
    tr0 = integrate(f0, z0, T, dt, save_every=100)
    ly0 = lyapunov_estimate(f0, T, renorm, dt, seed=v["seed"])
    sob0 = {N: sobolev_ratio(tr0, N) for N in Ns}
    gates = {"energy_drift": energy_drift(tr0), "lyapunov_top": ly0.top,
             "sobolev": {str(N): list(r) for N, r in sob0.items()}}
    gates["passed"] = bool(gates["energy_drift"] <= 1e-8 and abs(ly0.top) <= 1e-6 and
                           all(abs(a - 1) <= 1e-8 and abs(b - 1) <= 1e-8 for a, b in sob0.values()))
    out = {"gates": gates}
    if p.eps == 0:
        f = f0
    else:
        f = assemble_original(p, "post-step3", prepared)
    ly = lyapunov_estimate(f, T, renorm, dt, seed=v["seed"])
    tr = integrate(f, z0, T, dt, save_every=10)
    sob = {N: sobolev_ratio(tr, N) for N in Ns}
    out["lyapunov"] = {"top": ly.top, "band": list(ly.band), "T": ly.T}
    out["sobolev"] = {str(N): list(r) for N, r in sob.items()}
    thetas = rng.uniform(0, 2 * np.pi, (int(v["theta_samples"]), p.n))
    cr = conjugacy_residual(maps, nf, f, thetas, prepared=prepared, M=p.M)
    abl = conjugacy_residual(maps[:-1], nf, f, thetas, prepared=prepared, M=p.M) if maps else cr
    out["conjugacy"] = {"residual": cr.residual, "ablation_residual": abl.residual,
                        "r_final": r_final,
                        "passed": bool(cr.residual <= max(10 * r_final, 1e-10))}
    out["spectrum"] = spectrum_report(nf.blocks, nf.rho, p.lam, p.eps).as_dict()
    out["dynamics_passed"] = bool(abs(ly.top) <= 1e-3 and
                                  all(0.5 <= b <= a <= 2.0 for a, b in sob.values()))
    out["all_green"] = bool(gates["passed"] and out["dynamics_passed"] and out["conjugacy"]["passed"])
    if series_out is not None:
        from .wave_model import sobolev_weights

        cols = []
        for N in Ns:
            sw = sobolev_weights(p.J, N)
            tot = np.linalg.norm(sw * tr.x[:, :d], axis=1) + np.linalg.norm(sw * tr.x[:, d:], axis=1)
            cols.append(tot / tot[0])
        write_csv(series_out, ["t"] + [f"ratio_N{N}" for N in Ns],
                  [[float(t)] + [float(c[i]) for c in cols] for i, t in enumerate(tr.t)])
    return out


def cmd_verify(cfg, artifact, out: Path, log=print) -> int:
    rpath, adir = _artifact_paths(artifact)
    try:
        doc = json.loads(Path(rpath).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        log(f"cannot read artifact: {exc}")
        return EXIT_MISMATCH
    if doc.get("schema_version") != SCHEMA_VERSION or doc.get("config_hash") != config_hash(cfg):
        log("artifact does not match the config (hash or schema mismatch)")
        return EXIT_MISMATCH
    if doc.get("result", {}).get("status") != "ok" or content_hash(doc["result"]) != doc.get("result_hash"):
        log("artifact report is not a completed reduction or was modified")
        return EXIT_MISMATCH
    art = doc.get("artifacts", {})
    if "transforms" not in art:
        log("artifact has no transform dump")
        return EXIT_MISMATCH
    dpath = adir / art["transforms"]
    try:
        raw = dpath.read_bytes()
    except OSError as exc:
        log(f"cannot read transform dump: {exc}")
        return EXIT_MISMATCH
    if hashlib.sha256(raw).hexdigest() != art.get("transforms_sha256"):
        log("transform dump was modified (hash mismatch)")
        return EXIT_MISMATCH
    try:
        tables = read_dump(dpath)
    except ArtifactMismatch as exc:
        log(str(exc))
        return EXIT_MISMATCH
    p = build_params(cfg)
    nf, maps = load_transforms(tables, p.n, p.J)
    pm = prepare(p)
    metrics = verification_metrics(p, nf, maps, pm, cfg["verify"], float(doc["result"]["r_final"]),
                                   series_out=out / "timeseries.csv")
    res = dict(_header(cfg, "verify"), artifact_hash=art["transforms_sha256"], metrics=metrics)
    (out / "verify.json").write_text(dump_json(res), encoding="utf-8")
    log("verification " + ("all green" if metrics["all_green"] else "has failures"))
    return EXIT_OK if metrics["all_green"] else EXIT_FAIL


def cmd_report(artifact, log=print) -> int:
    rpath, adir = _artifact_paths(artifact)
    try:
        doc = json.loads(Path(rpath).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        log(f"cannot read report: {exc}")
        return EXIT_MISMATCH
    res = doc.get("result", {})
    log(f"config {doc.get('config_hash', '?')[:12]}  status {res.get('status')}")
    if res.get("status") == "ok":
        log(f"rho = {res['rho']:.15g}, transforms = {res['transforms']}, r_final = {res['r_final']:.3e}")
        log(f"{'nu':>3} {'r_nu':>11} {'r_next':>11} {'|P|':>11} {'margin':>10} {'K':>4}")
        for s in res["steps"]:
            log(f"{s['nu']:>3} {s['r_nu']:>11.3e} {s['r_next']:>11.3e} {s['P_norm']:>11.3e} "
                f"{s['min_divisor_margin']:>10.3g} {s['K_used']:>4}")
        log(f"max_j j|Q_j| = {res['spectrum']['decay_constant']:.4g}, "
            f"min gap = {res['spectrum']['min_gap']:.3g}")
    vpath = adir / "verify.json"
    if vpath.exists():
        m = json.loads(vpath.read_text(encoding="utf-8"))["metrics"]
        log(f"lyapunov {m['lyapunov']['top']:.3e}, conjugacy {m['conjugacy']['residual']:.3e}, "
            f"all green: {m['all_green']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self checks


def _suite_dense_solve(rng):
    worst = 0.0
    for _ in range(50):
        a, b = rng.choice([1, 2]), rng.choice([1, 2])
        Li = _sym(rng, a) + 3.0
        Lj = _sym(rng, b) + 1.0
        R = rng.normal(size=(a, b)) + 1j * rng.normal(size=(a, b))
        kw = rng.uniform(-5, 5)
        for fam in ("uu", "bb", "ub"):
            x, y = kron_block(fam, kw, Li, Lj, R), brute_force_block(fam, kw, Li, Lj, R)
            worst = max(worst, float(np.max(np.abs(x - y)) / max(np.max(np.abs(y)), 1e-300)))
    return worst <= 1e-12, worst


def _sym(rng, a):
    X = rng.normal(size=(a, a))
    return 0.5 * (X + X.T)


def _suite_exponential(rng):
    from scipy.linalg import expm

    d = 3
    H = rng.normal(size=(2 * d, 2 * d)) + 1j * rng.normal(size=(2 * d, 2 * d))
    H = 0.5 * (H + H.T)
    A = doubling_form(d) @ H
    A = A / np.linalg.norm(A, 2)
    f = LinearField(2 * d, A, None, np.array([1.0]), doubling_form(d))
    x0 = rng.normal(size=2 * d) + 0j
    tr = integrate(f, x0, 2.0, 0.05)
    err = float(np.max(np.abs(tr.x[-1] - expm(2.0 * A) @ x0)))
    e2 = float(np.max(np.abs(expm_series(0.01 * A) - (expm(0.01 * A) - np.eye(2 * d)))))
    return err <= 1e-8 and e2 <= 1e-15, max(err, e2)


def _suite_quadrature(rng):
    from scipy.linalg import expm

    from .kam_core import _gauss_legendre

    c, b, A = _gauss_legendre(6)
    worst = max(abs(float(np.sum(b * c ** q)) - 1.0 / (q + 1)) for q in range(12))
    K = 0.1 * (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))
    end, _ = picard_flow(lambda t: np.broadcast_to(K, (len(t), 4, 4)), nodes=8, tol=1e-14)
    err = float(np.max(np.abs(end - (expm(K) - np.eye(4)))))
    return worst <= 1e-14 and err <= 1e-13, max(worst, err)


def _suite_homological(rng):
    J = 2
    d = 2 * J + 1
    nf = NormalForm.unperturbed(1.0, 1.0, J)
    K = 4
    mk = lambda: TorusSeries(rng.normal(size=(2 * K + 1, d, d)) * np.exp(-np.abs(np.arange(-K, K + 1)))[:, None, None]
                             + 0j, 1, K)
    S = mk()
    S = TorusSeries(0.5 * (S.coeffs + np.swapaxes(S.coeffs, -1, -2)), 1, K)
    sym = QPBlockOperator(S, J, "symmetric")
    R = RTriple(sym, QPBlockOperator(mk(), J), sym)
    omega = np.array([1.3])
    try:
        sol = solve_homological(nf, R, omega, K, 1e-6, 1)
        res = homological_residual(sol, nf, R, omega, K)
    except (ArithmeticError, ValueError) as exc:
        return False, str(exc)
    return res <= 1e-10, res


SUITES = {"dense-solve": _suite_dense_solve, "exponential": _suite_exponential,
          "quadrature": _suite_quadrature, "homological-residual": _suite_homological}


def cmd_selfcheck(seed: int = 0, log=print) -> int:
    ok_all = True
    for name, fn in SUITES.items():
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failure of that suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        log(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return EXIT_OK if ok_all else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="kamreduce", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--out", help="output directory (overrides output.directory)")
        sp.add_argument("--threads", type=int, help="BLAS threads (else KAMREDUCE_THREADS)")
        sp.add_argument("--seed", type=int, help="seed for sampling (overrides the config)")
        sp.add_argument("--nu-max", dest="nu_max", type=int, help="number of KAM steps")
        sp.add_argument("--k-cap", dest="k_cap", type=int, help="cap on the Fourier truncation")

    common(sub.add_parser("reduce", help="run the reduction"))
    common(sub.add_parser("screen", help="Monte Carlo excluded-measure table"))
    v = sub.add_parser("verify", help="check a reduction artifact")
    common(v)
    v.add_argument("--artifact", required=True, help="report.json or the reduce output directory")
    r = sub.add_parser("report", help="summarize a reduction artifact")
    r.add_argument("--artifact", required=True)
    s = sub.add_parser("selfcheck", help="run the oracle suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(args.seed)
        if args.command == "report":
            return cmd_report(args.artifact)
        cfg = _apply_overrides(load_config(args.config), args)
        out = _outdir(cfg, args)
        if args.command == "reduce":
            return cmd_reduce(cfg, out)
        if args.command == "screen":
            return cmd_screen(cfg, out)
        return cmd_verify(cfg, args.artifact, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
