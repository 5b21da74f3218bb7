"""Protocol runner: named experiments, seeding, run persistence, export.

A run directory holds four files. config.json echoes the fully resolved
configuration. records.jsonl is the event stream, one JSON object per line
with a strictly increasing "step" field and wall-clock stamps. result.json
is the protocol payload and carries no clocks, so identical config and seed
reproduce it byte for byte. summary.csv is the flat table re-derivable from
result.json at any time via export.

Exit codes: 0 success; 1 protocol error (captured into result.json);
2 configuration or usage error; 3 finished with no result (for example a
waist search whose diagnostics came back empty-handed).
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import critvals, floquet, orbits
from .action import DiscreteLoop, action, iterate_loop
from .lagrangian import make_system, system_names

EXIT_OK = 0
EXIT_PROTOCOL_ERROR = 1
EXIT_USAGE = 2
EXIT_NO_RESULT = 3

PROTOCOLS = ("critvals", "waist", "minmax", "cylinder", "struwe",
             "floquet", "aubry")

PROTOCOL_DEFAULTS = {
    "critvals": {
        "method": "both", "tol_c": 1e-3, "n_grid": 48, "budget": 400,
    },
    "waist": {
        "e": None, "seeds": 32, "budget": 150, "tau_min": 0.1,
        "n_points": 48, "rho": 3e-3, "winding": None,
        "certificate_samples": 64,
    },
    "minmax": {
        "e": None, "m": 2, "n_knots": 16, "budget": 4000, "jitter": 0.0,
        "seeds": 32, "waist_budget": 150, "winding": None,
        "n_points": 64, "companion_budget": 200,
    },
    "cylinder": {
        "e": None, "halfwidth": 0.01, "steps": 10, "seeds": 32,
        "waist_budget": 150, "degeneracy_band": 1e-4, "winding": None,
    },
    "struwe": {
        "e_lo": None, "e_hi": None, "n_energies": 6, "m": 2, "seeds": 32,
        "n_knots": 16, "budget": 4000, "waist_budget": 150, "steps": 10,
        "winding": None, "companion_budget": 200, "n_points": 64,
    },
    "floquet": {
        "e": None, "source": "auto", "seeds": 32, "waist_budget": 150,
        "probe": False, "probe_budget": 400, "min_period_factor": 3,
        "winding": None,
    },
    "aubry": {
        "c_est": None, "n_grid": 32, "max_cycles": 16, "tol_aubry": None,
    },
}

# substream indices: one seeded generator per protocol stage, so worker
# scheduling or stage reordering can never shuffle random draws
SUB_CRITVALS, SUB_WAIST, SUB_MINMAX, SUB_CYLINDER = 0, 1, 2, 3
SUB_STRUWE, SUB_FLOQUET = 4, 5


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


class ExportError(RuntimeError):
    pass


class NoResult(RuntimeError):
    """Protocol finished cleanly but produced no positive result."""

    def __init__(self, message, payload):
        super().__init__(message)
        self.payload = payload


# ---------------------------------------------------------------------------
# serialization


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.complexfloating, complex)):
        return [float(x.real), float(x.imag)]
    return x


def _dump_json(doc, path):
    text = json.dumps(_jsonable(doc), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n")


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt_cell(row.get(k)) for k in header])


def _complex_pairs(arr):
    if arr is None:
        return None
    return [[float(z.real), float(z.imag)] for z in np.asarray(arr, dtype=complex)]


def _orbit_payload(rec, with_loop=False):
    out = {
        "energy": rec.energy,
        "period": rec.period,
        "action": rec.action,
        "energy_residual": rec.energy_residual,
        "shooting_residual": rec.shooting_residual,
        "grad_norm": rec.grad_norm,
        "index": rec.index,
        "nullity_total": rec.nullity_total,
        "is_waist": bool(rec.is_waist),
        "stability_class": rec.stability,
        "multipliers": _complex_pairs(rec.multipliers),
        "reduced_multipliers": _complex_pairs(rec.reduced_multipliers),
        "certificate": rec.certificate,
        "state0": list(map(float, rec.state0)),
        "n_points": rec.loop.n_points,
        "tag": None if rec.loop.tag is None else list(rec.loop.tag),
    }
    if with_loop:
        out["loop_points"] = rec.loop.points.tolist()
        out["log_period"] = rec.loop.log_period
    return out


# ---------------------------------------------------------------------------
# configuration


def _golden():
    ref = importlib.resources.files("waistlab").joinpath("golden.json")
    return json.loads(ref.read_text())


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _flatten_params(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_params(v, prefix=f"{name}."))
        else:
            out[name] = v
    return out


def resolve_config(system, protocol, seed, out, set_pairs=()):
    """Validate and fill a run configuration; raises ConfigError."""
    if system not in system_names():
        raise ConfigError(
            f"system: unknown system {system!r}; valid: {system_names()}"
        )
    if protocol not in PROTOCOLS:
        raise ConfigError(
            f"protocol: unknown protocol {protocol!r}; valid: {list(PROTOCOLS)}"
        )
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    if not (0 <= seed < 2 ** 64):
        raise ConfigError("seed: must fit an unsigned 64-bit integer")

    tree = {}
    for pair in set_pairs:
        if "=" not in pair:
            raise ConfigError(f"set: expected key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"set: {key!r} collides with a scalar knob")
        node[parts[-1]] = _coerce(raw)

    system_params = tree.pop("system", {})
    if not isinstance(system_params, dict):
        raise ConfigError("set: system.* overrides must be key=value pairs")

    params = dict(PROTOCOL_DEFAULTS[protocol])
    for name, value in _flatten_params(tree).items():
        knob = name.rsplit(".", 1)[-1]
        if knob not in params:
            raise ConfigError(
                f"set: unknown knob {name!r} for protocol {protocol!r}; "
                f"valid: {sorted(params)}"
            )
        params[knob] = value

    return {
        "system": system,
        "system_params": system_params,
        "protocol": protocol,
        "seed": seed,
        "out": str(out),
        "params": params,
    }


def _default_energy(config, model):
    """Energy for orbit protocols when the config leaves e unset.

    Slightly above the committed critical value where the theory places
    waists; d = 1 systems get the mid-well oscillation energy instead.
    """
    if model.dim == 1:
        grid = np.arange(1024)[:, None] / 1024
        u = model.potential(grid)
        return float(0.5 * (np.min(u) + np.max(u)))
    gold = _golden().get(config["system"])
    if not gold or "c_contractible" not in gold:
        raise ConfigError(
            "e: no default energy for this system; pass --set e=<value>"
        )
    c = gold["c_contractible"]["value"]
    base = gold.get("e0", 0.0)
    return float(c + 0.05 * (c - base))


# ---------------------------------------------------------------------------
# event stream


class EventLog:
    def __init__(self, path):
        self.path = Path(path)
        self.step = 0
        self.t0 = time.monotonic()
        self.events = []
        self._fh = open(self.path, "w")

    def emit(self, kind, **payload):
        rec = {
            "step": self.step,
            "wall_s": round(time.monotonic() - self.t0, 6),
            "kind": kind,
        }
        rec.update(_jsonable(payload))
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()
        self.events.append(rec)
        self.step += 1

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# protocols


def _find_waist_or_raise(model, params, rng, emit, e):
    emit("waist_search", e=e, seeds=params["seeds"])
    try:
        out = orbits.find_waist(
            model, e,
            tau_min=params.get("tau_min", 0.1),
            seeds=params["seeds"],
            winding=params.get("winding"),
            budget=params.get("waist_budget", params.get("budget", 150)),
            n_points=params.get("n_points", 48),
            rng=rng,
            rho=params.get("rho", 3e-3),
            certificate_samples=params.get("certificate_samples", 64),
        )
    except RuntimeError as exc:
        # every start hitting the period floor is a diagnosed no-result
        # (energy likely at or below critical), not a protocol failure
        if "barrier collapse" not in str(exc):
            raise
        out = orbits.WaistNotFound(message=str(exc),
                                   n_starts=int(params["seeds"]),
                                   collapsed_starts=int(params["seeds"]))
    if isinstance(out, orbits.WaistNotFound):
        payload = {
            "found": False,
            "message": out.message,
            "best_index": out.best_index,
            "best_action": out.best_action,
            "n_starts": out.n_starts,
            "collapsed_starts": out.collapsed_starts,
            "e": e,
        }
        raise NoResult(out.message, payload)
    emit("waist_found", action=out.action, period=out.period)
    return out


def _d1_oscillation(model, e):
    """Refined oscillation orbit around the potential minimum (d = 1)."""
    grid = np.arange(1024)[:, None] / 1024
    u = model.potential(grid)
    qs = float(grid[int(np.argmin(u)), 0])
    omega2 = float(model.hess_potential(np.array([qs]))[0, 0])
    if omega2 <= 0:
        raise RuntimeError("potential minimum is not a stable equilibrium")
    amp = float(np.sqrt(2 * max(e - float(np.min(u)), 1e-9) / omega2))
    th = 2 * np.pi * np.arange(96) / 96
    pts = (qs + amp * np.cos(th))[:, None]
    loop = DiscreteLoop(model.space, pts, period=2 * np.pi / np.sqrt(omega2))
    return orbits.refine_orbit(model, loop, e_target=e)


def _proto_critvals(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_CRITVALS])
    rep = critvals.critical_report(
        model, method=p["method"], tol_c=p["tol_c"], n_grid=p["n_grid"],
        rng=rng, budget=p["budget"],
    )
    for name in ("c_contractible", "c_all"):
        br = getattr(rep, name)
        for t in br.trace:
            emit("bisection_probe", bracket=name, scope=br.scope,
                 e=t["e"], found=t["found"])
        emit("bracket", bracket=name, lo=br.lo, hi=br.hi, value=br.value)
    return rep.to_dict()


def _rows_critvals(payload):
    header = ["quantity", "value", "lo", "hi", "scope", "method"]
    rows = [{"quantity": "e0", "value": payload["e0"]},
            {"quantity": "e0_residual", "value": payload["e0_residual"]}]
    for name in ("c_contractible", "c_all"):
        br = payload[name]
        rows.append({
            "quantity": name, "value": br["value"], "lo": br["lo"],
            "hi": br["hi"], "scope": br["scope"], "method": br["method"],
        })
    for name in ("c_u", "c_0", "c"):
        rows.append({"quantity": name, "value": payload[name]})
    return header, rows


def _proto_waist(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_WAIST])
    e = p["e"] if p["e"] is not None else _default_energy(config, model)
    rec = _find_waist_or_raise(model, p, rng, emit, e)
    floquet.attach_stability(model, rec)
    payload = {"found": True, "e": e, "orbit": _orbit_payload(rec, with_loop=True)}
    return payload


def _rows_waist(payload):
    header = ["found", "e", "action", "period", "index", "nullity_total",
              "energy_residual", "grad_norm", "class",
              "certificate_margin", "message"]
    if not payload.get("found"):
        return header, [{
            "found": False, "e": payload.get("e"),
            "message": payload.get("message"),
        }]
    orb = payload["orbit"]
    cert = orb.get("certificate") or {}
    return header, [{
        "found": True, "e": payload["e"], "action": orb["action"],
        "period": orb["period"], "index": orb["index"],
        "nullity_total": orb["nullity_total"],
        "energy_residual": orb["energy_residual"],
        "grad_norm": orb["grad_norm"], "class": orb["stability_class"],
        "certificate_margin": cert.get("margin"),
    }]


def _proto_minmax(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_MINMAX])
    e = p["e"] if p["e"] is not None else _default_energy(config, model)
    base = _find_waist_or_raise(model, p, rng, emit, e)
    m = int(p["m"])
    gamma = base.loop
    loop_a = iterate_loop(gamma, m)
    if gamma.space.is_torus and gamma.tag is not None and any(gamma.tag):
        # the waist winds, so its iterate lives in another component and
        # the companion is a fixed sublevel loop grafted in that component
        loop_b, companion_info = orbits.companion_below(
            model, gamma, m, e, rng=rng,
            budget=p.get("companion_budget", 200))
        companion_kind = "sublevel"
    else:
        loop_b, companion_info, companion_kind = gamma, None, "waist"
    emit("minmax_start", e=e, m=m, n_knots=p["n_knots"],
         companion=companion_kind)
    res = orbits.mountain_pass(
        model, e, loop_a, loop_b, n_knots=p["n_knots"],
        budget=p["budget"], rng=rng, jitter=p["jitter"],
    )
    for h in res.history:
        emit("minmax_sweep", **h)
    s_top = float(action(model, loop_a, e))
    s_comp = float(action(model, loop_b, e))
    payload = {
        "e": e,
        "m": m,
        "s_value": res.s_value,
        "endpoint_action_iterate": s_top,
        "endpoint_action_companion": s_comp,
        "base_waist_action": base.action,
        "base_waist_tag": None if gamma.tag is None else list(gamma.tag),
        "companion_kind": companion_kind,
        "companion_info": companion_info,
        "exceeds_endpoints": bool(res.s_value > max(s_top, s_comp)),
        "converged": res.converged,
        "refined": res.refined,
        "n_sweeps": res.n_sweeps,
        "history": res.history,
        "orbit": None if res.orbit is None else _orbit_payload(res.orbit),
    }
    return payload


def _rows_minmax(payload):
    header = ["e", "m", "s_value", "endpoint_action_iterate",
              "endpoint_action_companion", "companion_kind",
              "exceeds_endpoints", "converged", "n_sweeps"]
    return header, [{k: payload[k] for k in header}]


def _cylinder_payload(branch):
    samples = []
    for (e, rec) in branch.samples:
        samples.append({
            "e": e,
            "period": rec.period,
            "action": rec.action,
            "index": rec.index,
            "class": rec.stability,
            "is_waist": bool(rec.is_waist),
            "energy_residual": rec.energy_residual,
            "reduced_multipliers": _complex_pairs(rec.reduced_multipliers),
        })
    return {
        "samples": samples,
        "d_action_d_e": [None if not np.isfinite(v) else float(v)
                         for v in branch.d_action_d_e],
        "degeneracy_band": branch.degeneracy_band,
    }


def _proto_cylinder(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_CYLINDER])
    e = p["e"] if p["e"] is not None else _default_energy(config, model)
    base = _find_waist_or_raise(model, p, rng, emit, e)
    e_lo, e_hi = e - p["halfwidth"], e + p["halfwidth"]
    emit("cylinder_start", e_lo=e_lo, e_hi=e_hi, steps=p["steps"])
    branch = floquet.continue_cylinder(
        model, base, e_lo, e_hi, steps=int(p["steps"]),
        degeneracy_band=p["degeneracy_band"],
    )
    for (ee, rec) in branch.samples:
        emit("cylinder_sample", e=ee, period=rec.period, action=rec.action,
             index=rec.index)
    payload = _cylinder_payload(branch)
    payload["seed_energy"] = e
    return payload


def _rows_cylinder(payload):
    header = ["e", "period", "action", "index", "class", "is_waist",
              "d_action_d_e", "mult1_re", "mult1_im", "mult2_re", "mult2_im"]
    rows = []
    for k, s in enumerate(payload["samples"]):
        row = {key: s.get(key) for key in
               ("e", "period", "action", "index", "class", "is_waist")}
        row["d_action_d_e"] = payload["d_action_d_e"][k]
        mults = s.get("reduced_multipliers") or []
        for j, name in enumerate(("mult1", "mult2")):
            if j < len(mults):
                row[f"{name}_re"], row[f"{name}_im"] = mults[j]
        rows.append(row)
    return header, rows


def _default_energy_band(config, model):
    """Energy ladder for the struwe protocol when e_lo/e_hi are unset.

    A narrow band just above the contractible critical value: sublevel
    companions stay short there, while the ladder still spans several
    times the converged-string noise in s_e(m).
    """
    if model.dim == 1:
        mid = _default_energy(config, model)
        return mid - 0.01, mid + 0.01
    gold = _golden().get(config["system"])
    if not gold or "c_contractible" not in gold:
        raise ConfigError(
            "e_lo/e_hi: no default band for this system; "
            "pass --set e_lo=<value> --set e_hi=<value>"
        )
    c = gold["c_contractible"]["value"]
    base = gold.get("e0", 0.0)
    delta = c - base
    return float(c + 0.01 * delta), float(c + 0.06 * delta)


def _proto_struwe(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_STRUWE])
    lo_default, hi_default = (None, None)
    if p["e_lo"] is None or p["e_hi"] is None:
        lo_default, hi_default = _default_energy_band(config, model)
    e_lo = float(p["e_lo"]) if p["e_lo"] is not None else lo_default
    e_hi = float(p["e_hi"]) if p["e_hi"] is not None else hi_default
    mid = 0.5 * (e_lo + e_hi)
    base = _find_waist_or_raise(model, p, rng, emit, mid)
    branch = floquet.continue_cylinder(model, base, e_lo, e_hi,
                                       steps=int(p["steps"]))
    emit("cylinder_done", n_samples=len(branch.samples))
    energies = np.linspace(e_lo, e_hi, int(p["n_energies"]))
    scan = orbits.struwe_scan(model, int(p["m"]), list(energies), branch,
                              n_knots=p["n_knots"], budget=p["budget"],
                              rng=rng,
                              companion_budget=p.get("companion_budget", 200),
                              record=lambda d: emit("string_done", **d))
    for ee, val, conv in zip(scan.energies, scan.values, scan.converged):
        emit("struwe_point", e=ee, s_value=val, converged=conv)
    return {
        "m": scan.m,
        "energies": list(scan.energies),
        "values": list(scan.values),
        "converged": list(scan.converged),
        "monotone": bool(scan.monotone),
        "top_actions": [float(v) for v in scan.top_actions],
        "companion_actions": [float(v) for v in scan.companion_actions],
        "companion_kind": scan.companion_kind,
        "exceeds_endpoints": [
            bool(v > max(t, c)) for v, t, c in
            zip(scan.values, scan.top_actions, scan.companion_actions)
        ],
    }


def _rows_struwe(payload):
    header = ["m", "e", "s_value", "top_action", "companion_action",
              "exceeds_endpoints", "converged", "monotone"]
    rows = []
    for k, ee in enumerate(payload["energies"]):
        rows.append({
            "m": payload["m"], "e": ee,
            "s_value": payload["values"][k],
            "top_action": payload["top_actions"][k],
            "companion_action": payload["companion_actions"][k],
            "exceeds_endpoints": payload["exceeds_endpoints"][k],
            "converged": payload["converged"][k],
            "monotone": payload["monotone"],
        })
    return header, rows


def _proto_floquet(model, config, emit):
    p = config["params"]
    rng = np.random.default_rng([config["seed"], SUB_FLOQUET])
    e = p["e"] if p["e"] is not None else _default_energy(config, model)
    source = p["source"]
    if source == "auto":
        source = "oscillation" if model.dim == 1 else "waist"
    if source == "oscillation":
        emit("oscillation_seed", e=e)
        rec = _d1_oscillation(model, e)
    elif source == "waist":
        rec = _find_waist_or_raise(model, p, rng, emit, e)
    else:
        raise ConfigError(f"source: unknown orbit source {source!r}")
    rep = floquet.attach_stability(model, rec)
    emit("classified", stability_class=rep.stability_class)
    payload = {
        "e": e,
        "source": source,
        "orbit": _orbit_payload(rec, with_loop=True),
        "stability": rep.to_dict(),
        "unit_multiplier_geometric_count":
            floquet.unit_multiplier_geometric_count(rep.reduced_matrix),
    }
    if p["probe"]:
        subs = floquet.birkhoff_lewis_probe(
            model, rec, min_period_factor=int(p["min_period_factor"]),
            budget=int(p["probe_budget"]),
        )
        emit("probe_done", n_subharmonics=len(subs))
        payload["subharmonics"] = [
            dict(_orbit_payload(s), certificate=s.certificate) for s in subs
        ]
    return payload


def _rows_floquet(payload):
    header = ["role", "e", "period", "action", "index", "class",
              "four_elementary", "n", "m", "return_period"]
    orb = payload["orbit"]
    rows = [{
        "role": "base", "e": payload["e"], "period": orb["period"],
        "action": orb["action"], "index": orb["index"],
        "class": orb["stability_class"],
        "four_elementary": payload["stability"]["four_elementary"],
    }]
    for s in payload.get("subharmonics", []):
        cert = s["certificate"] or {}
        rows.append({
            "role": "subharmonic", "e": s["energy"], "period": s["period"],
            "action": s["action"], "n": cert.get("n"), "m": cert.get("m"),
            "return_period": cert.get("return_period"),
        })
    return header, rows


def _proto_aubry(model, config, emit):
    p = config["params"]
    c_est = p["c_est"]
    if c_est is None:
        # the node graph spans every loop class, so the finite threshold is
        # the all-classes critical value; the contractible value is the
        # only one defined (and equal) on the sphere. Use the upper bracket
        # edge where available: it is the certified cycle-free side, while
        # the midpoint can sit below the graph's own detection threshold.
        gold = _golden().get(config["system"], {})
        ref = gold.get("c_all", gold.get("c_contractible"))
        if ref is None:
            raise ConfigError("c_est: pass --set c_est=<value> for this system")
        c_est = ref.get("hi", ref["value"])
    emit("aubry_start", c_est=c_est, n_grid=p["n_grid"])
    rep = critvals.aubry_points(
        model, float(c_est), tol_aubry=p["tol_aubry"], n=int(p["n_grid"]),
        max_cycles=int(p["max_cycles"]),
    )
    emit("aubry_done", n_nodes=len(rep.node_indices), n_cycles=len(rep.cycles))
    return {
        "energy": rep.energy,
        "node_indices": [int(i) for i in rep.node_indices],
        "nodes": rep.nodes.tolist(),
        "loop_values": [float(v) for v in rep.loop_values],
        "cycles": [[int(i) for i in c] for c in rep.cycles],
        "cycle_energies": [float(v) for v in rep.cycle_energies],
    }


def _rows_aubry(payload):
    header = ["node_index", "x", "y", "z", "loop_value"]
    rows = []
    for idx, node, val in zip(payload["node_indices"], payload["nodes"],
                              payload["loop_values"]):
        row = {"node_index": idx, "loop_value": val,
               "x": node[0], "y": node[1] if len(node) > 1 else None,
               "z": node[2] if len(node) > 2 else None}
        rows.append(row)
    return header, rows


_PROTO_IMPL = {
    "critvals": _proto_critvals,
    "waist": _proto_waist,
    "minmax": _proto_minmax,
    "cylinder": _proto_cylinder,
    "struwe": _proto_struwe,
    "floquet": _proto_floquet,
    "aubry": _proto_aubry,
}

_ROW_BUILDERS = {
    "critvals": _rows_critvals,
    "waist": _rows_waist,
    "minmax": _rows_minmax,
    "cylinder": _rows_cylinder,
    "struwe": _rows_struwe,
    "floquet": _rows_floquet,
    "aubry": _rows_aubry,
}


# ---------------------------------------------------------------------------
# run / export


def summary_table(protocol, payload):
    """Flat table for a protocol payload; every number comes from it."""
    if payload.get("found") is False:
        # orbit protocols that end without a base waist all share the
        # search-outcome payload, whatever table they would have written
        return _rows_waist(payload)
    return _ROW_BUILDERS[protocol](payload)


def run(config):
    """Execute the configured protocol and persist the run directory.

    Returns (record, exit_code); the record holds the config echo, the
    payload, the event list, and the step counter.
    """
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(config, out / "config.json")
    log = EventLog(out / "records.jsonl")
    log.emit("run_start", system=config["system"],
             protocol=config["protocol"], seed=config["seed"])
    model = make_system(config["system"], **config["system_params"])
    status, code = "ok", EXIT_OK
    try:
        payload = _PROTO_IMPL[config["protocol"]](model, config, log.emit)
    except NoResult as exc:
        payload = exc.payload
        status, code = "no_result", EXIT_NO_RESULT
        log.emit("no_result", message=str(exc))
    except ConfigError:
        log.close()
        raise
    except Exception as exc:  # captured protocol failure
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        status, code = "error", EXIT_PROTOCOL_ERROR
        log.emit("error", type=type(exc).__name__, message=str(exc))
    log.emit("run_end", status=status)
    log.close()

    doc = {
        "system": config["system"],
        "system_params": config["system_params"],
        "protocol": config["protocol"],
        "seed": config["seed"],
        "params": config["params"],
        "status": status,
        "payload": payload,
    }
    _dump_json(doc, out / "result.json")
    if status != "error":
        header, rows = summary_table(config["protocol"], payload)
        _write_csv(out / "summary.csv", header, rows)
    record = {
        "config": config,
        "status": status,
        "payload": payload,
        "events": log.events,
        "n_steps": log.step,
    }
    return record, code


def export(run_dir, what="csv"):
    """Re-emit the flat summary table from result.json (idempotent)."""
    rd = Path(run_dir)
    res = rd / "result.json"
    if not res.exists():
        raise ExportError("missing payload")
    doc = json.loads(res.read_text())
    payload = doc.get("payload")
    protocol = doc.get("protocol")
    if not payload or protocol not in _ROW_BUILDERS or "error" in payload:
        raise ExportError("missing payload")
    header, rows = summary_table(protocol, payload)
    written = []
    if what in ("csv", "both"):
        path = rd / "summary.csv"
        _write_csv(path, header, rows)
        written.append(path)
    if what in ("jsonl", "both"):
        path = rd / "summary.jsonl"
        with open(path, "w") as fh:
            for row in rows:
                flat = {k: _jsonable(row.get(k)) for k in header
                        if row.get(k) is not None}
                fh.write(json.dumps(flat, sort_keys=True) + "\n")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# CLI


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="waistlab",
        description="variational periodic-orbit laboratory",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute a protocol into a run directory")
    runp.add_argument("--system", required=True)
    runp.add_argument("--protocol", required=True)
    runp.add_argument("--seed", default=0)
    runp.add_argument("--out", required=True)
    runp.add_argument("--set", dest="set_pairs", action="append", default=[],
                      metavar="KEY=VALUE",
                      help="override a knob, for example --set e=0.46 or "
                           "--set system.a=1.5")

    exp = sub.add_parser("export", help="re-emit tables from a run directory")
    exp.add_argument("run_dir")
    exp.add_argument("--csv", action="store_true")
    exp.add_argument("--jsonl", action="store_true")
    return ap


def main(argv=None):
    ap = _build_parser()
    args = ap.parse_args(argv)
    if args.command == "run":
        try:
            config = resolve_config(args.system, args.protocol, args.seed,
                                    args.out, args.set_pairs)
            record, code = run(config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if record["status"] == "error":
            err = record["payload"]["error"]
            print(f"protocol error: {err['type']}: {err['message']}",
                  file=sys.stderr)
        elif record["status"] == "no_result":
            print(f"no result: {record['payload'].get('message')}",
                  file=sys.stderr)
        else:
            print(f"ok: {config['out']}")
        return code
    if args.command == "export":
        what = "both" if (args.csv and args.jsonl) else (
            "jsonl" if args.jsonl else "csv")
        try:
            for path in export(args.run_dir, what):
                print(path)
        except ExportError as exc:
            print(f"export error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return EXIT_OK
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
