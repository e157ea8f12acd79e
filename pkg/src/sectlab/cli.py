"""Command line front end for the laboratory experiments.

Nine subcommands map onto the library surfaces: closed-form equilibria
tables, cylinder transition maps, symmetry probes, compound-matrix
self-checks, Birkhoff ensembles, recurrence statistics, empirical
measure comparison, the laminar slowdown sweep, and the partial
sectional expansion summary.

Configuration comes from a TOML file plus a handful of flags.  Unknown
keys are rejected by full dotted path.  Every JSON report embeds the
resolved configuration and the base seed, outputs carry no timestamps,
and floats are printed with 17 significant digits so a rerun with the
same seed is byte identical.
"""

import argparse
import csv
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

try:
    import tomllib
except ImportError:
    import tomli as tomllib

import numpy as np

from . import compound_linalg as cl
from . import ergodic_stats as es
from . import field_library as fl
from . import flow_engine as fe
from . import suspension as sp

OUT_ENV_VAR = "SECTLAB_OUT"


class ConfigError(ValueError):
    pass


# -- configuration schema -----------------------------------------------------

# leaf: (kind, default).  kinds: str, int, float, numlist, intgrid_or_none
_SCHEMA = {
    "model": {
        "family": ("str", "G0"),
        "omega": ("float", 2.0),
        "ell": ("int", 0),
        "zeta0": ("float", 0.0),
        "epsilon": ("float", 0.12),
    },
    "solenoid": {
        "k": ("int", 0),  # 0 requests the smallest base the family admits
        "alpha": ("float", 0.1),
        "beta": ("float", 0.5),
        "eps_u": ("float", 0.05),
        "expansion": ("intgrid_or_none", None),
    },
    "run": {
        "n_returns": ("int", 100000),
        "n_seeds": ("int", 10),
        "warmup": ("int", 64),
        "tau_cap": ("float", 2500.0),
        "seed": ("int", 0),
        "threads": ("int", 1),
    },
    "experiment": {
        "kind": ("str", ""),
        "entries": ("numlist", [0.5, -0.5, 1.0, -1.0, 1.7, -1.7, 2.5, -2.5]),
        "zeta0_grid": ("numlist", [0.0, 0.2, 0.4, 0.6, 0.8, 0.9]),
        "bins": ("int", 64),
        "deltas": ("numlist", [1e-2, 1e-3, 1e-4]),
        "radii": ("numlist", [1e-2, 1e-3, 1e-4]),
        "t_max": ("float", 400.0),
        "grid_n": ("int", 20),
        "n_matrices": ("int", 100),
        "tv_gate": ("float", 0.05),
    },
    "output": {
        "dir": ("str", "out"),
    },
}


def _check_leaf(path, kind, value):
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError("key '%s' expects a string" % path)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("key '%s' expects an integer" % path)
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("key '%s' expects a number" % path)
        return float(value)
    if kind == "numlist":
        if not isinstance(value, list) or not value:
            raise ConfigError("key '%s' expects a nonempty list of numbers"
                              % path)
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError("key '%s[%d]' expects a number" % (path, i))
            out.append(float(v))
        return out
    if kind == "intgrid_or_none":
        if value is None:
            return None
        if not isinstance(value, list) or not value:
            raise ConfigError("key '%s' expects a list of integer rows"
                              % path)
        rows = []
        for i, row in enumerate(value):
            if not isinstance(row, list):
                raise ConfigError("key '%s[%d]' expects a list of integers"
                                  % (path, i))
            vals = []
            for j, v in enumerate(row):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError("key '%s[%d][%d]' expects an integer"
                                      % (path, i, j))
                vals.append(int(v))
            rows.append(vals)
        return rows
    raise AssertionError(kind)


def load_config(path=None):
    """Parse the TOML file and fill in defaults.

    Returns (config, explicit) where explicit is the set of dotted key
    paths the file actually set.  Any key outside the schema is rejected
    by its full dotted path.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError("config file not found: %s" % path)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config file %s: %s" % (path, exc))
    cfg = {}
    explicit = set()
    for section, leaves in _SCHEMA.items():
        cfg[section] = {}
        for key, (kind, default) in leaves.items():
            cfg[section][key] = (default if not isinstance(default, list)
                                 else list(default))
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError("unknown key '%s'" % section)
        if not isinstance(body, dict):
            raise ConfigError("key '%s' expects a table" % section)
        for key, value in body.items():
            dotted = "%s.%s" % (section, key)
            if key not in _SCHEMA[section]:
                raise ConfigError("unknown key '%s'" % dotted)
            kind = _SCHEMA[section][key][0]
            cfg[section][key] = _check_leaf(dotted, kind, value)
            explicit.add(dotted)
    _validate_ranges(cfg)
    return cfg, explicit


def _validate_ranges(cfg):
    run = cfg["run"]
    if run["n_returns"] < 1:
        raise ConfigError("run.n_returns must be positive")
    if run["n_seeds"] < 1:
        raise ConfigError("run.n_seeds must be positive")
    if run["warmup"] < 0:
        raise ConfigError("run.warmup must be nonnegative")
    if run["tau_cap"] <= 0.0:
        raise ConfigError("run.tau_cap must be positive")
    if run["threads"] < 1:
        raise ConfigError("run.threads must be positive")
    exp = cfg["experiment"]
    if exp["bins"] < 2:
        raise ConfigError("experiment.bins must be at least 2")
    if exp["grid_n"] < 2:
        raise ConfigError("experiment.grid_n must be at least 2")
    if exp["n_matrices"] < 1:
        raise ConfigError("experiment.n_matrices must be positive")
    if exp["t_max"] <= 0.0:
        raise ConfigError("experiment.t_max must be positive")
    for d in exp["deltas"]:
        if not 0.0 < d < 0.5:
            raise ConfigError("experiment.deltas entries must lie in (0, 0.5)")
    for r in exp["radii"]:
        if not 0.0 < r < 1.0:
            raise ConfigError("experiment.radii entries must lie in (0, 1)")
    for z in exp["zeta0_grid"]:
        if not 0.0 <= z <= 0.95:
            raise ConfigError(
                "experiment.zeta0_grid entries must lie in [0, 0.95]")


def build_model(cfg):
    m = cfg["model"]
    try:
        return fl.ModelSpec(family=m["family"], omega=m["omega"],
                            ell=m["ell"], zeta0=m["zeta0"],
                            epsilon=m["epsilon"])
    except ValueError as exc:
        raise ConfigError("model: %s" % exc)


def _sol_kwargs(cfg, model):
    s = cfg["solenoid"]
    k = s["k"] if s["k"] > 0 else sp.required_k(model)
    kw = dict(k=k, alpha=s["alpha"], beta=s["beta"], eps_u=s["eps_u"])
    if s["expansion"] is not None:
        kw["expansion"] = tuple(tuple(v for v in row)
                                for row in s["expansion"])
    return kw


def build_solenoid(cfg, model):
    try:
        sol = sp.SolenoidSpec(**_sol_kwargs(cfg, model))
        sp.check_compatible(model, sol)
        return sol
    except sp.GluingError as exc:
        raise ConfigError("solenoid: %s" % exc)


def _model_kwargs(model):
    return dict(family=model.family, omega=model.omega, ell=model.ell,
                zeta0=model.zeta0, epsilon=model.epsilon)


# -- deterministic serialization ----------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonify(v):
    if isinstance(v, dict):
        return {str(k): _jsonify(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonify(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonify(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return x if math.isfinite(x) else format(x, "g")
    if isinstance(v, complex):
        return {"re": _jsonify(v.real), "im": _jsonify(v.imag)}
    return v


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonify(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _report_head(command, cfg):
    echo = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return {"command": command, "config": _jsonify(echo),
            "seed": cfg["run"]["seed"]}


# -- parallel helpers ----------------------------------------------------------

def _ensemble_worker(job):
    model = fl.ModelSpec(**job["model"])
    sol = sp.SolenoidSpec(**job["sol"])
    ens = es.collect_ensemble(
        model, sol, job["n_returns"], seed=job["seed"],
        warmup=job["warmup"], tau_cap=job["tau_cap"],
        deltas=tuple(job["deltas"]), radii=tuple(job["radii"]),
        want_measure=job["want_measure"], measure_bins=job["bins"])
    return (ens.accumulator, ens.ledger, ens.measure, ens.segments)


def _sweep_worker(job):
    sol = sp.SolenoidSpec(**job["sol"])
    rows = es.slowdown_sweep(
        [job["zeta0"]], job["n_returns"], family=job["family"], sol=sol,
        seed=job["seed"], warmup=job["warmup"], tau_cap=job["tau_cap"])
    return rows[0]


def _map_jobs(worker, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
            return list(ex.map(worker, jobs))
    return [worker(j) for j in jobs]


def _ensemble_jobs(cfg, model, sol, seeds, want_measure=False):
    exp = cfg["experiment"]
    run = cfg["run"]
    base = dict(model=_model_kwargs(model), sol=_sol_kwargs(cfg, model),
                n_returns=run["n_returns"], warmup=run["warmup"],
                tau_cap=run["tau_cap"], deltas=list(exp["deltas"]),
                radii=list(exp["radii"]), want_measure=want_measure,
                bins=exp["bins"])
    return [dict(base, seed=s) for s in seeds]


# -- experiment: equilibria -----------------------------------------------------

def run_equilibria(cfg, outdir):
    model = build_model(cfg)
    points = fl.equilibria(model) + fl.spurious_equilibria_scan(model)
    d = fl.model_dim(model)
    rows = []
    entries = []
    for eq in points:
        tag = eq.sing_class.tag if eq.sing_class is not None else "outside-taxonomy"
        lam_s = eq.sing_class.lambda_s if eq.sing_class is not None else None
        lam_u = eq.sing_class.lambda_u if eq.sing_class is not None else None
        ev = np.sort_complex(eq.eigenvalues)
        loc = list(eq.location) + [0.0] * (d - eq.location.size)
        row = [eq.label] + loc
        for j in range(d):
            if j < ev.size:
                row += [ev[j].real, ev[j].imag]
            else:
                row += [0.0, 0.0]
        row += [tag,
                lam_s if lam_s is not None else math.nan,
                lam_u if lam_u is not None else math.nan]
        rows.append(row)
        entries.append({
            "label": eq.label,
            "location": loc,
            "eigenvalues": [[v.real, v.imag] for v in ev],
            "class": tag,
            "lambda_s": lam_s,
            "lambda_u": lam_u,
        })
    header = ["label"] + ["x%d" % j for j in range(d)]
    for j in range(d):
        header += ["ev%d_re" % j, "ev%d_im" % j]
    header += ["class", "lambda_s", "lambda_u"]
    write_csv(os.path.join(outdir, "equilibria.csv"), header, rows)
    payload = _report_head("equilibria", cfg)
    payload["results"] = {"family": model.family, "dim": d,
                          "equilibria": entries,
                          "n_closed_form": len(fl.equilibria(model)),
                          "n_shoulder": len(points) - len(fl.equilibria(model))}
    write_json(os.path.join(outdir, "equilibria.json"), payload)
    print("equilibria: %d points (%d closed form, %d shoulder zeros)"
          % (len(points), payload["results"]["n_closed_form"],
             payload["results"]["n_shoulder"]))
    return 0


# -- experiment: transition ------------------------------------------------------

def run_transition(cfg, outdir):
    model = build_model(cfg)
    core_name = fl.core_family(model)
    if model.zeta0 != 0.0:
        raise ConfigError(
            "transition: the map is taken on the cylinder core; the chart "
            "slowdown does not apply there, set model.zeta0 = 0")
    core = fl.ModelSpec(family=core_name, omega=model.omega, ell=model.ell,
                        epsilon=model.epsilon)
    d = fl.model_dim(core)
    exp = cfg["experiment"]
    rows = []
    entries = []
    n_trapped = 0
    max_dev = 0.0
    max_tau_band = 0.0
    for x in exp["entries"]:
        tv = np.zeros(d - 1)
        tv[0] = x
        try:
            res = fe.transition_map(core, tv, t_max=exp["t_max"])
            dev = float(np.linalg.norm(res.exit - res.entry))
            max_dev = max(max_dev, dev)
            if 2.0 <= abs(x) <= 3.0:
                max_tau_band = max(max_tau_band, res.tau)
            rows.append([x, "crossed", res.exit[0],
                         res.exit[1] if d == 3 else 0.0, res.tau,
                         res.residual, dev])
            entries.append({"entry": x, "status": "crossed",
                            "exit": list(res.exit), "tau": res.tau,
                            "residual": res.residual, "identity_dev": dev})
        except fe.NoCrossingError as exc:
            n_trapped += 1
            rows.append([x, "trapped", math.nan, math.nan, math.nan,
                         math.nan, math.nan])
            entries.append({"entry": x, "status": "trapped",
                            "elapsed": exc.elapsed})
    header = ["entry_x", "status", "exit_x0", "exit_x1", "tau",
              "residual", "identity_dev"]
    write_csv(os.path.join(outdir, "transition.csv"), header, rows)
    payload = _report_head("transition", cfg)
    payload["results"] = {
        "core_family": core_name, "dim": d,
        "n_entries": len(exp["entries"]),
        "n_crossed": len(exp["entries"]) - n_trapped,
        "n_trapped": n_trapped,
        "max_identity_dev": max_dev,
        "max_tau_outer_band": max_tau_band,
        "rows": entries,
    }
    write_json(os.path.join(outdir, "transition.json"), payload)
    print("transition: %d crossed, %d trapped, max identity deviation %s"
          % (payload["results"]["n_crossed"], n_trapped, _fmt(max_dev)))
    withheld = n_trapped + (1 if max_dev > 1e-5 else 0)
    return withheld


# -- experiment: symmetry --------------------------------------------------------

def _flow_dev(model, w0, T, transform, n_samples=120):
    t1 = fe.integrate(model, w0, T)
    t2 = fe.integrate(model, transform(np.asarray(w0, dtype=float)), T)
    dev = 0.0
    for t in np.linspace(0.0, T, n_samples):
        dev = max(dev, float(np.linalg.norm(transform(t1.at(t)) - t2.at(t))))
    return dev


def run_symmetry(cfg, outdir):
    model = build_model(cfg)
    core = fl.core_family(model)
    d = fl.model_dim(model)
    if core not in ("Y0", "Y1", "Y3", "Y4", "Y3hat", "Y4hat"):
        raise ConfigError(
            "symmetry: probes are defined for the planar and rotational "
            "families, not %s" % core)
    rng = np.random.default_rng(cfg["run"]["seed"])
    results = {"family": model.family, "core": core, "dim": d}
    withheld = 0

    if d == 2:
        def mirror(w):
            return np.array([-w[0], w[1]])
        pts = rng.uniform(-1.8, 1.8, size=(64, 2))
        field_dev = max(
            float(np.linalg.norm(fl.field_eval(model, mirror(w))
                                 - mirror(fl.field_eval(model, w))))
            for w in pts)
        # probe inside the bounded conservative region; outer level sets
        # run off to infinite height in finite time
        flow_dev = _flow_dev(model, np.array([0.5, 0.2]), 25.0, mirror)
        results["mirror_field_dev"] = field_dev
        results["mirror_flow_dev"] = flow_dev
        if field_dev > 1e-12 or flow_dev > 1e-6:
            withheld += 1
        v_idx = 1
    else:
        v_idx = 2 if core in ("Y3hat", "Y4hat") else d - 1
        h_idx = [i for i in range(d) if i != v_idx][:2]

        def rotate(theta):
            c, s = math.cos(theta), math.sin(theta)

            def f(w):
                out = np.array(w, dtype=float)
                a, b = w[h_idx[0]], w[h_idx[1]]
                out[h_idx[0]] = c * a - s * b
                out[h_idx[1]] = s * a + c * b
                return out
            return f
        field_dev = 0.0
        for theta in (math.pi / 3.0, math.pi / 7.0, 2.2):
            R = rotate(theta)
            for _ in range(32):
                w = rng.uniform(-1.8, 1.8, size=d)
                field_dev = max(field_dev, float(np.linalg.norm(
                    fl.field_eval(model, R(w)) - R(fl.field_eval(model, w)))))
        w0 = np.zeros(d)
        w0[h_idx[0]] = 0.5
        w0[h_idx[1]] = 0.3
        w0[v_idx] = -0.4
        flow_dev = _flow_dev(model, w0, 25.0, rotate(math.pi / 3.0))
        results["rotation_field_dev"] = field_dev
        results["rotation_flow_dev"] = flow_dev
        if field_dev > 1e-12 or flow_dev > 1e-6:
            withheld += 1

    # vertical axis is invariant; probes from both sides of the lower
    # saddle should land on it, and the inter-saddle segment flows down
    axis_rows = []
    for y_start in (0.9, -0.9):
        w0 = np.zeros(d)
        w0[v_idx] = y_start
        # contraction toward the lower saddle runs at rate 1/5, so the
        # far-side start needs the long horizon to clear the 1e-6 gate
        traj = fe.integrate(model, w0, 100.0)
        end = traj.at(100.0)
        lo = np.zeros(d)
        lo[v_idx] = -1.0
        hi = np.zeros(d)
        hi[v_idx] = 1.0
        row = {"start": y_start,
               "end": list(end),
               "dist_to_lower": float(np.linalg.norm(end - lo)),
               "dist_to_upper": float(np.linalg.norm(end - hi)),
               "off_axis": float(np.linalg.norm(np.delete(end, v_idx)))}
        axis_rows.append(row)
        if row["dist_to_lower"] > 1e-6 or row["off_axis"] > 1e-9:
            withheld += 1
    results["axis_probes"] = axis_rows

    payload = _report_head("symmetry", cfg)
    payload["results"] = results
    write_json(os.path.join(outdir, "symmetry.json"), payload)
    kind = "mirror" if d == 2 else "rotation"
    print("symmetry: %s field deviation %s, flow deviation %s, "
          "%d axis probes" % (kind, _fmt(field_dev), _fmt(flow_dev),
                              len(axis_rows)))
    return withheld


# -- experiment: compound-check ---------------------------------------------------

def _subset_sums(ev, k):
    return [sum(c) for c in itertools.combinations(ev, k)]


def _spectrum_dev(got, want):
    """Greedy matched distance between two small eigenvalue multisets.

    Lexicographic sorting misparates conjugate-pair groups whose real
    parts nearly coincide, so pair each value with its nearest unused
    partner instead."""
    pool = list(want)
    dev = 0.0
    for g in got:
        j = min(range(len(pool)), key=lambda i: abs(g - pool[i]))
        dev = max(dev, abs(g - pool[j]))
        pool.pop(j)
    return float(dev)


def run_compound_check(cfg, outdir):
    exp = cfg["experiment"]
    rng = np.random.default_rng(cfg["run"]["seed"])
    n = exp["n_matrices"]
    res = {}
    cb_err = 0.0
    fd_err = 0.0
    eig_err = 0.0
    trace_err = 0.0
    for dim in (3, 4):
        for kk in range(2, dim):
            for _ in range(n):
                A = rng.normal(size=(dim, dim))
                B = rng.normal(size=(dim, dim))
                lhs = cl.multiplicative_compound(A @ B, kk)
                rhs = (cl.multiplicative_compound(A, kk)
                       @ cl.multiplicative_compound(B, kk))
                cb_err = max(cb_err, float(np.max(np.abs(lhs - rhs))))
                add = cl.additive_compound(A, kk)
                h = 1e-6
                fd = (cl.multiplicative_compound(np.eye(dim) + h * A, kk)
                      - cl.multiplicative_compound(np.eye(dim) - h * A, kk)
                      ) / (2.0 * h)
                scale = max(1.0, float(np.max(np.abs(add))))
                fd_err = max(fd_err,
                             float(np.max(np.abs(fd - add))) / scale)
                ev = np.linalg.eigvals(A)
                eig_err = max(eig_err, _spectrum_dev(
                    np.linalg.eigvals(add), _subset_sums(ev, kk)))
                binom = math.comb(dim - 1, kk - 1)
                trace_err = max(trace_err, abs(
                    float(np.trace(add)) - binom * float(np.trace(A))))
    res["cauchy_binet_max_err"] = cb_err
    res["fd_max_rel_err"] = fd_err
    res["eig_subset_sum_max_err"] = eig_err
    res["trace_identity_max_err"] = trace_err

    # field jacobian grid: subset-sum spectrum and the trace-divergence tie
    model = build_model(cfg)
    d = fl.model_dim(model)
    gn = exp["grid_n"] if d <= 3 else 5
    axes = [np.linspace(-2.0, 2.0, gn) for _ in range(d)]
    jac_eig_err = 0.0
    jac_trace_err = 0.0
    kk = 2 if d >= 3 else None
    n_grid = 0
    if kk is not None:
        for point in itertools.product(*axes):
            w = np.array(point)
            J = fl.field_jacobian(model, w)
            add = cl.additive_compound(J, kk)
            jac_eig_err = max(jac_eig_err, _spectrum_dev(
                np.linalg.eigvals(add),
                _subset_sums(np.linalg.eigvals(J), kk)))
            binom = math.comb(d - 1, kk - 1)
            jac_trace_err = max(jac_trace_err, abs(
                float(np.trace(add)) - binom * fl.divergence(model, w)))
            n_grid += 1
    res["jacobian_grid_points"] = n_grid
    res["jacobian_eig_subset_sum_max_err"] = jac_eig_err
    res["jacobian_trace_divergence_max_err"] = jac_trace_err

    checks = {
        "cauchy_binet_ok": cb_err < 1e-11,
        "fd_ok": fd_err < 1e-5,
        "eig_subset_sum_ok": eig_err < 1e-8,
        "trace_identity_ok": trace_err < 1e-11,
        "jacobian_eig_ok": jac_eig_err < 1e-8,
        "jacobian_trace_ok": jac_trace_err < 1e-10,
    }
    res["checks"] = checks
    payload = _report_head("compound-check", cfg)
    payload["results"] = res
    write_json(os.path.join(outdir, "compound_check.json"), payload)
    n_bad = sum(1 for ok in checks.values() if not ok)
    print("compound-check: %d of %d checks clean (worst product error %s, "
          "worst spectral error %s)"
          % (len(checks) - n_bad, len(checks), _fmt(cb_err),
             _fmt(max(eig_err, jac_eig_err))))
    return n_bad


# -- experiment: birkhoff ---------------------------------------------------------

def _merge_parts(parts, deltas, radii):
    merged = es.BirkhoffAccumulator(deltas=tuple(deltas),
                                    radii=tuple(radii))
    for acc, _, _, _ in parts:
        merged = merged.merge(acc)
    return merged


def _seed_list(cfg):
    run = cfg["run"]
    return [run["seed"] + i for i in range(run["n_seeds"])]


def _delta_rows(acc):
    rows = []
    for dlt in acc.deltas:
        rows.append([dlt,
                     es.sr_average(acc, dlt, "discrete"),
                     es.sr_average(acc, dlt, "continuous"),
                     es.sr_average(acc, dlt, "per_return")])
    return rows


def _radius_rows(acc, with_bound=False):
    rows = []
    for r in acc.radii:
        row = [r, es.wsr_frequency(acc, r), es.ball_quad_average(acc, r)]
        if with_bound:
            bound = es.ball_log_bound(r)
            row += [bound, row[2] / bound if bound > 0 else math.nan]
        rows.append(row)
    return rows


def run_birkhoff(cfg, outdir):
    model = build_model(cfg)
    sol = build_solenoid(cfg, model)
    exp = cfg["experiment"]
    seeds = _seed_list(cfg)
    jobs = _ensemble_jobs(cfg, model, sol, seeds)
    parts = _map_jobs(_ensemble_worker, jobs, cfg["run"]["threads"])
    reports = []
    seed_rows = []
    for seed, (acc, ledger, _, segments) in zip(seeds, parts):
        rep = es.condition_verdicts(acc, model=model, sol=sol, ledger=ledger)
        reports.append(rep)
        seed_rows.append([
            seed, rep.n_returns, rep.n_crossings, rep.total_time,
            rep.n_segments, rep.n_flagged, rep.psi_cu_avg,
            rep.psi_cu_per_return, rep.psi_3_avg, rep.psi_3_per_return,
            rep.nu2se_margin, rep.nu3se_margin, rep.wase_rate, rep.tau_mean,
            rep.verdicts["wnu2se"], rep.verdicts["wase"],
            rep.verdicts["wnu3se"], rep.verdicts["wnu2se_implies_wase"]])
    merged = _merge_parts(parts, exp["deltas"], exp["radii"])
    merged_rep = es.condition_verdicts(merged, model=model, sol=sol)
    write_csv(os.path.join(outdir, "birkhoff_seeds.csv"),
              ["seed", "n_returns", "n_crossings", "total_time",
               "n_segments", "n_flagged", "psi_cu_avg", "psi_cu_per_return",
               "psi_3_avg", "psi_3_per_return", "nu2se_margin",
               "nu3se_margin", "wase_rate", "tau_mean", "wnu2se", "wase",
               "wnu3se", "wnu2se_implies_wase"],
              seed_rows)
    write_csv(os.path.join(outdir, "birkhoff_delta.csv"),
              ["delta", "sr_discrete", "sr_continuous", "sr_per_return"],
              _delta_rows(merged))
    write_csv(os.path.join(outdir, "birkhoff_radius.csv"),
              ["radius", "wsr_frequency", "ball_quad_average"],
              _radius_rows(merged))
    payload = _report_head("birkhoff", cfg)
    payload["results"] = {
        "merged": merged_rep.to_dict(),
        "per_seed": [r.to_dict() for r in reports],
        "flagged_fraction": (merged.n_flagged / merged.n_segments
                             if merged.n_segments else 0.0),
    }
    write_json(os.path.join(outdir, "birkhoff.json"), payload)
    v = merged_rep.verdicts
    print("birkhoff: %d returns over %d seeds, order-2 margin %s (%s), "
          "volume rate %s (%s), implication %s"
          % (merged_rep.n_returns, len(seeds),
             _fmt(merged_rep.nu2se_margin), v["wnu2se"],
             _fmt(merged_rep.wase_rate), v["wase"],
             v["wnu2se_implies_wase"]))
    withheld = sum(1 for val in v.values() if val == es.INCONCLUSIVE)
    return withheld


# -- experiment: recurrence --------------------------------------------------------

def run_recurrence(cfg, outdir):
    model = build_model(cfg)
    sol = build_solenoid(cfg, model)
    exp = cfg["experiment"]
    run = cfg["run"]
    ens = es.collect_ensemble(
        model, sol, run["n_returns"], seed=run["seed"],
        warmup=run["warmup"], tau_cap=run["tau_cap"],
        deltas=tuple(exp["deltas"]), radii=tuple(exp["radii"]))
    acc = ens.accumulator
    rep = es.condition_verdicts(acc, model=model, sol=sol,
                                ledger=ens.ledger)
    deltas_sorted = sorted(acc.deltas, reverse=True)
    sr_seq = [es.sr_average(acc, d, "discrete") for d in deltas_sorted]
    monotone = all(sr_seq[i] >= sr_seq[i + 1] - 1e-12
                   for i in range(len(sr_seq) - 1))
    radius_rows = _radius_rows(acc, with_bound=True)
    ratios = [row[4] for row in radius_rows if math.isfinite(row[4])]
    fitted_c = max(ratios) if ratios else math.nan
    write_csv(os.path.join(outdir, "recurrence_delta.csv"),
              ["delta", "sr_discrete", "sr_continuous", "sr_per_return"],
              _delta_rows(acc))
    write_csv(os.path.join(outdir, "recurrence_radius.csv"),
              ["radius", "wsr_frequency", "ball_quad_average",
               "disk_log_bound", "ratio"],
              radius_rows)
    payload = _report_head("recurrence", cfg)
    payload["results"] = {
        "n_returns": acc.n_returns,
        "n_marks": acc.n_marks,
        "flagged_fraction": ens.flagged_fraction,
        "sr_decreasing_in_delta": monotone,
        "fitted_quadrature_constant": fitted_c,
        "tau_loglaw_slope": rep.tau_loglaw_slope,
        "tau_loglaw_intercept": rep.tau_loglaw_intercept,
        "tau_envelope_excess": rep.tau_envelope_excess,
        "sr": {str(d): es.sr_average(acc, d, "discrete")
               for d in acc.deltas},
        "sr_continuous": {str(d): es.sr_average(acc, d, "continuous")
                          for d in acc.deltas},
        "wsr": {str(r): es.wsr_frequency(acc, r) for r in acc.radii},
        "ball_quadrature": {str(r): es.ball_quad_average(acc, r)
                            for r in acc.radii},
    }
    write_json(os.path.join(outdir, "recurrence.json"), payload)
    print("recurrence: %d unit-time marks over %d returns, smallest-delta "
          "average %s, quadrature constant %s"
          % (acc.n_marks, acc.n_returns, _fmt(sr_seq[-1]), _fmt(fitted_c)))
    return 0 if monotone else 1


# -- experiment: measure ------------------------------------------------------------

def run_measure(cfg, outdir):
    model = build_model(cfg)
    sol = build_solenoid(cfg, model)
    exp = cfg["experiment"]
    run = cfg["run"]
    seeds = [run["seed"], run["seed"] + 1]
    jobs = _ensemble_jobs(cfg, model, sol, seeds, want_measure=True)
    parts = _map_jobs(_ensemble_worker, jobs, min(cfg["run"]["threads"], 2))
    ma = parts[0][2]
    mb = parts[1][2]
    tv = ma.tv_distance(mb)
    wa = ma.normalized()
    wb = mb.normalized()
    rows = []
    if sol.k == 1:
        header = ["bin", "weight_a", "weight_b"]
        for i in range(exp["bins"]):
            rows.append([i, wa[i], wb[i]])
    else:
        header = ["bin0", "bin1", "weight_a", "weight_b"]
        for idx in np.ndindex(wa.shape):
            rows.append(list(idx) + [wa[idx], wb[idx]])
    write_csv(os.path.join(outdir, "measure_marginals.csv"), header, rows)
    payload = _report_head("measure", cfg)
    payload["results"] = {
        "seeds": seeds,
        "bins": exp["bins"],
        "k": sol.k,
        "tv_distance": tv,
        "tv_gate": exp["tv_gate"],
        "within_gate": tv < exp["tv_gate"],
        "n_returns": [p[0].n_returns for p in parts],
        "flagged_segments": [p[0].n_flagged for p in parts],
    }
    write_json(os.path.join(outdir, "measure.json"), payload)
    print("measure: TV distance %s between seeds %d and %d (%d returns each)"
          % (_fmt(tv), seeds[0], seeds[1], run["n_returns"]))
    return 0 if tv < exp["tv_gate"] else 1


# -- experiment: slowdown-sweep -------------------------------------------------------

def run_slowdown_sweep(cfg, outdir):
    model = build_model(cfg)
    run = cfg["run"]
    exp = cfg["experiment"]
    family = model.family if model.family.startswith("Ghat") else "Ghat3"
    probe = fl.ModelSpec(family=family)
    s = cfg["solenoid"]
    # a wider chart window resolves the slowdown scaling; honor an
    # explicit configuration value, widen the default otherwise
    explicit = cfg.get("_explicit", ())
    eps_u = s["eps_u"] if "solenoid.eps_u" in explicit else 0.2
    sol_kw = dict(k=sp.required_k(probe), alpha=s["alpha"], beta=s["beta"],
                  eps_u=eps_u)
    jobs = [dict(sol=sol_kw, zeta0=z, n_returns=run["n_returns"],
                 family=family, seed=run["seed"], warmup=run["warmup"],
                 tau_cap=run["tau_cap"])
            for z in exp["zeta0_grid"]]
    rows = _map_jobs(_sweep_worker, jobs, run["threads"])
    base_sigma = rows[0].sigma_per_crossing
    for row in rows:
        row.sigma_ratio = (row.sigma_per_crossing / base_sigma
                           if base_sigma != 0.0 else math.nan)
    csv_rows = [[r.zeta0, r.slow_factor, r.psi2_per_return, r.psi2_per_time,
                 r.psi3_per_return, r.psi3_per_time, r.sigma_per_crossing,
                 r.sigma_ratio, r.n_returns, r.n_crossings, r.n_flagged]
                for r in rows]
    write_csv(os.path.join(outdir, "slowdown_sweep.csv"),
              ["zeta0", "slow_factor", "psi2_per_return", "psi2_per_time",
               "psi3_per_return", "psi3_per_time", "sigma_per_crossing",
               "sigma_ratio", "n_returns", "n_crossings", "n_flagged"],
              csv_rows)
    ratio_dev = max((abs(r.sigma_ratio - r.slow_factor) / r.slow_factor
                     for r in rows if math.isfinite(r.sigma_ratio)),
                    default=math.nan)
    psi2_seq = [r.psi2_per_return for r in rows]
    monotone = all(psi2_seq[i] <= psi2_seq[i + 1] + 1e-6
                   for i in range(len(psi2_seq) - 1))
    payload = _report_head("slowdown-sweep", cfg)
    payload["results"] = {
        "family": family,
        "eps_u": eps_u,
        "rows": [r.__dict__ for r in rows],
        "sigma_ratio_max_rel_dev": ratio_dev,
        "psi2_per_return_nondecreasing": monotone,
    }
    write_json(os.path.join(outdir, "slowdown_sweep.json"), payload)
    print("slowdown-sweep: %d grid points on %s, slowdown-ratio deviation %s"
          % (len(rows), family, _fmt(ratio_dev)))
    return 0


# -- experiment: psectional -----------------------------------------------------------

def run_psectional(cfg, outdir):
    model = build_model(cfg)
    sol = build_solenoid(cfg, model)
    seeds = _seed_list(cfg)
    jobs = _ensemble_jobs(cfg, model, sol, seeds)
    parts = _map_jobs(_ensemble_worker, jobs, cfg["run"]["threads"])
    rows = []
    entries = []
    withheld = 0
    for seed, (acc, ledger, _, _) in zip(seeds, parts):
        rep = es.condition_verdicts(acc, model=model, sol=sol, ledger=ledger)
        conv2 = bool(rep.converged.get("psi_cu"))
        conv3 = bool(rep.converged.get("psi_3"))
        rows.append([seed, rep.nu2se_margin, rep.nu3se_margin,
                     rep.wase_rate, rep.tau_mean, conv2, conv3,
                     rep.verdicts["wnu2se"], rep.verdicts["wnu3se"],
                     rep.verdicts["wase"]])
        entries.append({"seed": seed, "order2_margin": rep.nu2se_margin,
                        "order3_margin": rep.nu3se_margin,
                        "wase_rate": rep.wase_rate,
                        "verdicts": rep.verdicts})
        withheld += sum(1 for val in rep.verdicts.values()
                        if val == es.INCONCLUSIVE)
    write_csv(os.path.join(outdir, "psectional.csv"),
              ["seed", "order2_margin", "order3_margin", "wase_rate",
               "tau_mean", "order2_converged", "order3_converged",
               "wnu2se", "wnu3se", "wase"],
              rows)
    n2 = sum(1 for r in rows if r[7] == es.HOLDS)
    n3 = sum(1 for r in rows if r[8] == es.HOLDS)
    payload = _report_head("psectional", cfg)
    payload["results"] = {
        "per_seed": entries,
        "order2_holds": n2,
        "order3_holds": n3,
        "n_seeds": len(seeds),
    }
    write_json(os.path.join(outdir, "psectional.json"), payload)
    print("psectional: order-2 margin positive on %d/%d seeds, order-3 on "
          "%d/%d" % (n2, len(seeds), n3, len(seeds)))
    return withheld


# -- driver -------------------------------------------------------------------------

_RUNNERS = {
    "equilibria": run_equilibria,
    "transition": run_transition,
    "symmetry": run_symmetry,
    "compound-check": run_compound_check,
    "birkhoff": run_birkhoff,
    "recurrence": run_recurrence,
    "measure": run_measure,
    "slowdown-sweep": run_slowdown_sweep,
    "psectional": run_psectional,
}

_HELP = {
    "equilibria": "tabulate closed-form equilibria, shoulder zeros, and "
                  "their saddle taxonomy",
    "transition": "bottom-to-top cylinder transition map over an entry grid",
    "symmetry": "mirror or rotational equivariance and axis-orbit probes",
    "compound-check": "self-checks of the exterior-power matrix calculus",
    "birkhoff": "seeded ensembles of sectional-expansion Birkhoff averages",
    "recurrence": "truncated-log recurrence statistics near the saddles",
    "measure": "total-variation agreement of two empirical measures",
    "slowdown-sweep": "laminar slowdown parameter sweep on a Ghat family",
    "psectional": "per-seed order-2 and order-3 expansion margins",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="TOML configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override run.seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="override run.threads")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory (overrides %s and "
                             "output.dir)" % OUT_ENV_VAR)
    common.add_argument("--strict", action="store_true",
                        default=argparse.SUPPRESS,
                        help="exit nonzero when any verdict is withheld or "
                             "any hard check misses its tolerance")
    parser = argparse.ArgumentParser(
        prog="sectlab", parents=[common],
        description="numerical laboratory for sectional-expansion "
                    "diagnostics of glued solenoid suspensions",
        epilog="The %s environment variable overrides output.dir; the "
               "--out flag overrides both." % OUT_ENV_VAR)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="experiment")
    for name in _RUNNERS:
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


def main(argv=None):
    ns = build_parser().parse_args(argv)
    strict = getattr(ns, "strict", False)
    try:
        cfg, explicit = load_config(getattr(ns, "config", None))
        kind = cfg["experiment"]["kind"]
        if kind and kind != ns.command:
            raise ConfigError(
                "config requests experiment.kind = %r but the %r "
                "subcommand was invoked" % (kind, ns.command))
        seed = getattr(ns, "seed", None)
        if seed is not None:
            cfg["run"]["seed"] = int(seed)
        threads = getattr(ns, "threads", None)
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be positive")
            cfg["run"]["threads"] = int(threads)
        out_flag = getattr(ns, "out", None)
        out_env = os.environ.get(OUT_ENV_VAR)
        if out_flag is not None:
            cfg["output"]["dir"] = out_flag
        elif out_env:
            cfg["output"]["dir"] = out_env
        cfg["_explicit"] = sorted(explicit)
        outdir = cfg["output"]["dir"]
        os.makedirs(outdir, exist_ok=True)
        runner = _RUNNERS[ns.command]
        withheld = runner(cfg, outdir)
    except ConfigError as exc:
        print("sectlab: error: %s" % exc, file=sys.stderr)
        return 2
    if withheld and strict:
        print("sectlab: %d withheld or missed checks under --strict"
              % withheld, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
