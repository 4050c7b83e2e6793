"""Experiment runner.

    python -m dalab <scenario> --config run.ini [--out DIR] [--seed N] [--workers N]
    python -m dalab compare RUN_A/manifest.json RUN_B/manifest.json

Every scenario certifies the map first.  Outputs are CSV tables, a
``summary.json`` of scalar results, and ``manifest.json`` listing every file
with its sha256.  Wall-clock timings live only in the manifest and are
ignored by ``compare``; everything else is a function of (config, seed).

Exit codes: 2 config, 3 certification, 4 numerical failure, 5 I/O.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import cocycle, conjugacy, disintegration, foliation, periodic
from .config import SCENARIOS, ExperimentConfig, load_config
from .errors import CertificationFailed, ConfigError, NumericalError, SchemaMismatch
from .maps import DAMap, verify_partial_hyperbolicity
from .parallel import WORKERS_ENV

EXIT_CONFIG, EXIT_CERT, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5
MANIFEST = "manifest.json"
SUMMARY = "summary.json"
STAGES = ("exponents", "periodic", "conjugacy", "foliation", "disintegrate", "mk")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def plain(obj):
    """JSON-ready copy: arrays to lists, non-finite floats to strings."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.repr}
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# stages: each takes (cfg, f, out, state) and returns (summary, files)


def stage_certify(cfg, f, out, state):
    p = cfg.section("certify")
    cert = verify_partial_hyperbolicity(f, p["iterates"], p["grid"], p["apertures"], raise_on_failure=False)
    state["certificate"] = cert
    dump_json(out / "certificate.json", cert.summary())
    if not cert.verified:
        raise CertificationFailed(f"cone certificate failed: {cert.summary()['cone_margins']}")
    return cert.summary(), ["certificate.json"]


def stage_exponents(cfg, f, out, state):
    p = cfg.section("exponents")
    est = cocycle.volume_average_exponents(f, p["samples"], p["n"], cfg.seed, p["burn_in"], cfg.workers)
    rep = cocycle.exponent_inequality_report(f, f.linear, est, p["sigmas"], p["zero_sum_tol"], state.get("certificate"))
    row = est.row()
    _write_rows(out / "exponents.csv", list(row), [list(row.values())])
    _write_rows(
        out / "exponent_samples.csv",
        ["sample", "lambda_low", "lambda_mid", "lambda_high"],
        [[i, *map(float, v)] for i, v in enumerate(est.per_sample)],
    )
    lin = [float(np.log(abs(v))) for v in f.linear.eigenvalues]
    return {"estimate": row, "linear": lin, "inequalities": rep.as_dict()}, ["exponents.csv", "exponent_samples.csv"]


def stage_periodic(cfg, f, out, state):
    p = cfg.section("periodic")
    v = periodic.periodic_data_constancy(f, p["max_period"], p["tol"], p["count_cap"], cfg.workers)
    periodic.write_periodic_csv(out / "periodic.csv", v.data)
    return v.as_dict(), ["periodic.csv"]


def stage_conjugacy(cfg, f, out, state):
    p = cfg.section("conjugacy")
    h = conjugacy.solve_semiconjugacy(f, f.linear, p["resolution"], p["tol"], p["max_iters"])
    res = conjugacy.conjugacy_residual(h, f, samples=p["residual_samples"], seed=cfg.seed, refine=p["refine"])
    fib = conjugacy.fiber_diagnostics(h, f, p["fiber_samples"], cfg.seed, refine=p["refine"])
    ratio = conjugacy.geometric_ratio_check(f, f.linear, k=p["ratio_k"], samples=p["ratio_samples"], seed=cfg.seed)
    h.save(out / "conjugacy.field")
    _write_rows(
        out / "conjugacy_ratios.csv",
        list(ratio.rows[0].__dict__) if ratio.rows else ["separation"],
        [list(r.__dict__.values()) for r in ratio.rows],
    )
    summary = {
        "iterations": list(h.iterations),
        "grid_residual": h.grid_residual,
        "sup_u": h.sup_u,
        "c_emp": h.c_emp,
        "c_bound": h.c_bound,
        "residual": res.as_dict(),
        "fiber": fib.as_dict(),
        "ratio": {k: v for k, v in ratio.as_dict().items() if k != "rows"},
    }
    return summary, ["conjugacy.field", "conjugacy.field.txt", "conjugacy_ratios.csv"]


def _bundles(cfg, f, state, section):
    p = cfg.section(section)
    key = ("bundles", p["resolution"])
    if key not in state:
        state[key] = {
            lab: foliation.compute_bundle(f, lab, p["resolution"], p.get("tol", 1e-10), p.get("max_iters", 300), 0)
            for lab in f.linear.labels
        }
    return state[key]


def stage_foliation(cfg, f, out, state):
    p = cfg.section("foliation")
    bundles = _bundles(cfg, f, state, "foliation")
    files, resid = [], {}
    for lab, bf in bundles.items():
        resid[lab] = foliation.invariance_residual(bf, f, p["residual_samples"], cfg.seed, p["refine"])
        bf.save(out / f"bundle_{lab}.field")
        files += [f"bundle_{lab}.field", f"bundle_{lab}.field.txt"]
    mid = bundles[f.linear.labels[1]]
    x0 = np.array(p["curve_point"])
    curve = foliation.integrate_center_curve(mid, x0, p["curve_half_length"], p["step"], f, p["refine"])
    image = foliation.integrate_center_curve(mid, f.apply(x0), p["curve_half_length"], p["step"], f, p["refine"])
    foliation.write_curve_csv(out / "center_curves.csv", [curve, image])
    files.append("center_curves.csv")
    hol = {}
    for kind in ("cs", "cu"):
        s, src, tgt, _ = foliation.holonomy_pair(
            f, bundles, x0, kind, p["holonomy_half"], p["holonomy_gap"], p["holonomy_points"], p["refine"]
        )
        hm = foliation.center_holonomy(f, bundles, kind, src, tgt, s, refine=p["refine"])
        foliation.write_holonomy_csv(out / f"holonomy_{kind}.csv", hm)
        files.append(f"holonomy_{kind}.csv")
        hol[kind] = {"lipschitz": list(hm.lipschitz), "monotone": hm.monotone, "max_miss": float(np.max(hm.miss))}
    summary = {
        "invariance_residual": resid,
        "tangent_alignment": foliation.tangent_alignment(curve, mid, f, p["refine"]),
        "image_coherence": foliation.image_coherence(f, curve, image),
        "holonomy": hol,
    }
    return summary, files


def stage_disintegrate(cfg, f, out, state):
    p = cfg.section("disintegrate")
    bundles = _bundles(cfg, f, state, "foliation")
    box = foliation.build_foliated_box(f, np.array(p["box_point"]), bundles, p["box_sizes"], p["box_half_length"])
    est = disintegration.estimate_conditionals(
        box, p["samples"], p["bins"], cfg.seed, p["cells"], p["min_count"], cfg.workers
    )
    disintegration.write_histograms_csv(out / "conditionals.csv", est)
    rep = disintegration.classify_disintegration(est, p["levels"], disintegration.Thresholds(p["alpha"], p["atom"]))
    lengths = [v for v in p["profile_lengths"] if v <= 2 * p["box_half_length"]]
    prof = disintegration.concentration_profile(
        f, box, lengths, p["profile_samples"], cfg.seed, p["bins"], p["cells"], workers=cfg.workers
    )
    _write_rows(
        out / "concentration.csv",
        ["length", "value", "stderr"],
        zip(map(float, prof.lengths), map(float, prof.values), map(float, prof.stderr)),
    )
    birk = disintegration.birkhoff_discrepancy(f, None, p["birkhoff_n"], p["birkhoff_characters"], cfg.seed)
    summary = {
        "verdict": rep.verdict,
        "classifier": rep.as_dict(),
        "concentration": {"monotone": prof.monotone, "mode": prof.mode, "threshold": prof.threshold},
        "birkhoff": birk.as_dict(),
    }
    return summary, ["conditionals.csv", "concentration.csv"]


def stage_mk(cfg, f, out, state):
    p = cfg.section("mk")
    ctx = disintegration.mk_context(f, p["gamma0"], p["resolution"], p["step"])
    half = p["base_spread"]
    t = np.linspace(-half, half, p["base_points"]) if p["base_points"] > 1 else np.zeros(1)
    xi = ctx.base_points(t)
    ks = range(p["k_max"] + 1)
    checks, meas = disintegration.mk_pushforward_survey(ctx, xi, ks)
    scan = disintegration.length_ratio_scan(meas)
    disintegration.write_mk_csv(out / "mk_lengths.csv", scan)
    _write_rows(
        out / "mk_pushforward.csv",
        ["base", "k", "mass_identity", "hausdorff", "endpoint_gap", "route_gap"],
        [[c.base, c.k, int(c.mass_identity), c.hausdorff, c.endpoint_gap, c.route_gap] for c in checks],
    )
    x = np.array(p["exponent_point"])
    ce = disintegration.center_exponent_from_mk(f, f.linear, x, p["exponent_n"], resolution=p["resolution"])
    ref = cocycle.finite_time_exponents(f, x, p["exponent_n"], burn_in=0)
    summary = {
        "lambda": ctx.lam,
        "mass_identity": all(c.mass_identity for c in checks),
        "max_hausdorff": max(c.hausdorff for c in checks),
        "scan": {k: v for k, v in scan.as_dict().items() if k != "rows"},
        "center_exponent": {"mk": ce.value, "cocycle": float(ref.as_array()[1]), "n": ce.n},
    }
    return summary, ["mk_lengths.csv", "mk_pushforward.csv"]


STAGE_FUNCS = {
    "exponents": stage_exponents,
    "periodic": stage_periodic,
    "conjugacy": stage_conjugacy,
    "foliation": stage_foliation,
    "disintegrate": stage_disintegrate,
    "mk": stage_mk,
}


# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunManifest:
    config: dict
    version: str
    timings: dict
    files: dict  # name -> sha256

    def as_dict(self) -> dict:
        return {"config": self.config, "version": self.version, "timings": self.timings, "files": self.files}


def run(cfg: ExperimentConfig, out=None) -> RunManifest:
    """Certify, run the scenario's stages in order, write outputs and the manifest."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    f: DAMap = cfg.build_map()
    stages = STAGES if cfg.scenario == "full-survey" else () if cfg.scenario == "certify" else (cfg.scenario,)
    state, summary, files, timings = {}, {}, [], {}
    for name, func in [("certify", stage_certify)] + [(s, STAGE_FUNCS[s]) for s in stages]:
        t0 = time.perf_counter()
        summary[name], written = func(cfg, f, out, state)
        timings[name] = time.perf_counter() - t0
        files += written
    dump_json(out / SUMMARY, summary)
    (out / "config.ini").write_text(cfg.source, encoding="utf-8")
    files += [SUMMARY, "config.ini"]
    man = RunManifest(cfg.echo(), tool_version(), timings, {name: sha256(out / name) for name in sorted(files)})
    dump_json(out / MANIFEST, man.as_dict())
    return man


# ---------------------------------------------------------------------------
# compare


def _load_run(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    man = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(man, dict) or not {"config", "files", "version"} <= set(man):
        raise SchemaMismatch(f"{path} is not a run manifest")
    summ = path.parent / SUMMARY
    summary = json.loads(summ.read_text(encoding="utf-8")) if summ.exists() else {}
    return man, summary


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and obj and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
        for i, v in enumerate(obj):
            yield f"{prefix}[{i}]", v
    elif not isinstance(obj, list):
        yield prefix, obj


def compare(a, b) -> dict:
    """Numeric and categorical differences between two runs' summaries; timings ignored."""
    man_a, sum_a = _load_run(a)
    man_b, sum_b = _load_run(b)
    if set(sum_a) != set(sum_b):
        raise SchemaMismatch(f"stage sets differ: {sorted(sum_a)} vs {sorted(sum_b)}")
    fa, fb = dict(_flatten(sum_a)), dict(_flatten(sum_b))
    if set(fa) != set(fb):
        missing = sorted(set(fa) ^ set(fb))
        raise SchemaMismatch(f"summary keys differ: {missing[:5]}")
    numeric, categorical = {}, {}
    for key in sorted(fa):
        va, vb = fa[key], fb[key]
        if va == vb:
            continue
        if isinstance(va, (int, float)) and isinstance(vb, (int, float)) and not isinstance(va, bool):
            numeric[key] = {"a": va, "b": vb, "diff": vb - va}
        else:
            categorical[key] = {"a": va, "b": vb}
    digests = sorted(k for k in set(man_a["files"]) | set(man_b["files"]) if man_a["files"].get(k) != man_b["files"].get(k))
    return {"numeric": numeric, "categorical": categorical, "files_differ": digests}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dalab", description="DA-map experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SCENARIOS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help=f"defaults to ${WORKERS_ENV} or the CPU count")
    cp = sub.add_parser("compare")
    cp.add_argument("a")
    cp.add_argument("b")
    cp.add_argument("--out", help="write the diff report here instead of stdout")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            rep = compare(args.a, args.b)
            text = json.dumps(plain(rep), indent=2, sort_keys=True) + "\n"
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return 0
        cfg = load_config(args.config)
        cfg.scenario = args.command
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be positive")
            cfg.workers = args.workers
        man = run(cfg, args.out)
        sys.stdout.write(f"wrote {len(man.files)} files to {args.out or cfg.out}\n")
        return 0
    except (ConfigError, SchemaMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationFailed as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
