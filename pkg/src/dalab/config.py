"""Experiment configuration: bracketed sections of ``key = value`` lines.

Reals are written as decimal strings and parsed with ``float``; integer
vectors are whitespace separated.  Unknown sections or keys are errors.

    [map]
    matrix = 3 2 1  2 2 1  1 1 1

    [perturbation 1]
    kind = shear
    target = 0
    freq = 0 1 1
    amplitude = 0.05

    [run]
    scenario = full-survey
    seed = 7
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .maps import DAMap, Shear, Twist
from .torus import analyze_linear

SCENARIOS = ("certify", "exponents", "periodic", "conjugacy", "foliation", "disintegrate", "mk", "full-survey")


def _int(lo=None, hi=None):
    def parse(s):
        v = int(s)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"{v} outside [{lo}, {hi}]")
        return v

    return parse


def _float(lo=None, hi=None, strict_lo=False):
    def parse(s):
        v = float(s)
        if not np.isfinite(v):
            raise ValueError("not finite")
        if lo is not None and (v < lo or (strict_lo and v == lo)):
            raise ValueError(f"{v} below {'or at ' if strict_lo else ''}{lo}")
        if hi is not None and v > hi:
            raise ValueError(f"{v} above {hi}")
        return v

    return parse


def _vector(item, n=None, min_len=1):
    def parse(s):
        parts = s.replace(",", " ").split()
        if n is not None and len(parts) != n:
            raise ValueError(f"expected {n} values, got {len(parts)}")
        if len(parts) < min_len:
            raise ValueError(f"expected at least {min_len} values")
        return tuple(item(p) for p in parts)

    return parse


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} not one of {options}")
        return s

    return parse


POS = _int(1)
NONNEG = _int(0)
PFLOAT = _float(0.0, strict_lo=True)
UNIT = _float(0.0, 1.0, strict_lo=True)

# section -> key -> (parser, default)
SCHEMA = {
    "map": {"matrix": (_vector(int, 9), "3 2 1 2 2 1 1 1 1")},
    "run": {
        "scenario": (_choice(*SCENARIOS), "full-survey"),
        "seed": (NONNEG, "0"),
        "out": (str, "results"),
        "workers": (POS, None),
    },
    "certify": {
        "iterates": (POS, "4"),
        "grid": (POS, "8"),
        "apertures": (_vector(UNIT, 3), "0.5 0.5 0.5"),
    },
    "exponents": {
        "samples": (_int(2), "1000"),
        "n": (POS, "10000"),
        "burn_in": (NONNEG, "100"),
        "sigmas": (PFLOAT, "3"),
        "zero_sum_tol": (PFLOAT, "1e-3"),
    },
    "periodic": {
        "max_period": (POS, None),
        "tol": (PFLOAT, "1e-6"),
        "count_cap": (POS, "20000"),
    },
    "conjugacy": {
        "resolution": (_int(4), "64"),
        "tol": (PFLOAT, "1e-12"),
        "max_iters": (POS, "1000"),
        "residual_samples": (POS, "100000"),
        "refine": (NONNEG, "30"),
        "fiber_samples": (POS, "20000"),
        "ratio_samples": (POS, "2000"),
        "ratio_k": (POS, "5"),
    },
    "foliation": {
        "resolution": (_int(4), "32"),
        "tol": (PFLOAT, "1e-10"),
        "max_iters": (POS, "300"),
        "residual_samples": (POS, "100000"),
        "refine": (NONNEG, "20"),
        "curve_point": (_vector(float, 3), "0.3 0.4 0.5"),
        "curve_half_length": (PFLOAT, "0.2"),
        "step": (PFLOAT, "0.005"),
        "holonomy_half": (PFLOAT, "0.05"),
        "holonomy_gap": (PFLOAT, "0.1"),
        "holonomy_points": (_int(3), "21"),
    },
    "disintegrate": {
        "box_point": (_vector(float, 3), "0.3 0.4 0.5"),
        "box_sizes": (_vector(PFLOAT, 2), "0.1 0.1"),
        "box_half_length": (PFLOAT, "0.2"),
        "samples": (POS, "1000000"),
        "bins": (POS, "64"),
        "levels": (_vector(POS, min_len=2), "8 16 32 64"),
        "cells": (_vector(POS, 2), "4 4"),
        "min_count": (POS, "100"),
        "alpha": (UNIT, "0.05"),
        "atom": (UNIT, "0.5"),
        "profile_lengths": (_vector(PFLOAT, min_len=1), "0.05 0.1 0.2 0.24 0.3 0.4"),
        "profile_samples": (POS, "200000"),
        "birkhoff_n": (POS, "100000"),
        "birkhoff_characters": (POS, "20"),
    },
    "mk": {
        "gamma0": (PFLOAT, "0.1"),
        "k_max": (NONNEG, "6"),
        "base_points": (POS, "3"),
        "base_spread": (PFLOAT, "0.04"),
        "step": (PFLOAT, "0.005"),
        "resolution": (_int(4), "32"),
        "exponent_n": (POS, "1000"),
        "exponent_point": (_vector(float, 3), "0.1234 0.2345 0.3456"),
    },
}

PERTURBATION_SCHEMA = {
    "shear": {
        "target": (_int(0, 2), None),
        "freq": (_vector(int, 3), None),
        "amplitude": (_float(), None),
    },
    "twist": {
        "frame": (_vector(float, 9), "1 0 0 0 1 0 0 0 1"),
        "plane": (_vector(_int(0, 2), 2), None),
        "center": (_vector(float, 3), None),
        "radius": (_float(0.0, 0.5, strict_lo=True), None),
        "theta_max": (_float(), None),
    },
}


@dataclass
class ExperimentConfig:
    matrix: tuple
    perturbations: list
    scenario: str
    params: dict
    out: str
    seed: int
    workers: int | None = None
    source: str = field(default="", repr=False)

    def section(self, name: str) -> dict:
        return dict(self.params[name])

    def build_map(self) -> DAMap:
        lin = analyze_linear(np.array(self.matrix, dtype=int).reshape(3, 3).tolist())
        prims = []
        for p in self.perturbations:
            if p["kind"] == "shear":
                prims.append(Shear(p["target"], p["freq"], p["amplitude"]))
            else:
                prims.append(
                    Twist(
                        np.array(p["frame"], dtype=float).reshape(3, 3).T,
                        p["plane"],
                        np.array(p["center"], dtype=float),
                        p["radius"],
                        p["theta_max"],
                    )
                )
        return DAMap(lin, prims)

    def echo(self) -> dict:
        """Plain, JSON-ready view of the validated config."""
        return {
            "matrix": list(self.matrix),
            "perturbations": [{k: list(v) if isinstance(v, tuple) else v for k, v in p.items()} for p in self.perturbations],
            "scenario": self.scenario,
            "seed": self.seed,
            "params": {s: {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()} for s, d in self.params.items()},
        }


def _parse_section(name, items, schema):
    out = {}
    for key, raw in items.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        try:
            out[key] = schema[key][0](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    for key, (parser, default) in schema.items():
        if key in out:
            continue
        if default is None:
            out[key] = None
        else:
            out[key] = parser(default)
    return out


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    params = {}
    perts = []
    for name in cp.sections():
        items = dict(cp.items(name))
        if name.startswith("perturbation"):
            kind = items.pop("kind", None)
            if kind not in PERTURBATION_SCHEMA:
                raise ConfigError(f"[{name}] needs kind = shear or twist")
            p = _parse_section(name, items, PERTURBATION_SCHEMA[kind])
            missing = [k for k, v in p.items() if v is None]
            if missing:
                raise ConfigError(f"[{name}] missing {', '.join(missing)}")
            p["kind"] = kind
            perts.append((name, p))
            continue
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        params[name] = _parse_section(name, items, SCHEMA[name])
    for name, schema in SCHEMA.items():
        if name not in params:
            params[name] = _parse_section(name, {}, schema)
    run = params.pop("run")
    matrix = params.pop("map")["matrix"]
    for _, p in perts:
        if p["kind"] == "shear" and p["freq"][p["target"]] != 0:
            raise ConfigError("shear frequency must vanish on the target coordinate")
    try:
        analyze_linear(np.array(matrix, dtype=int).reshape(3, 3).tolist())
    except ValueError as exc:
        raise ConfigError(f"matrix: {exc}") from None
    d = params["disintegrate"]
    for lv in d["levels"]:
        if d["bins"] % lv:
            raise ConfigError(f"[disintegrate] level {lv} does not divide bins = {d['bins']}")
    return ExperimentConfig(
        matrix=tuple(matrix),
        perturbations=[p for _, p in perts],
        scenario=run["scenario"],
        params=params,
        out=run["out"],
        seed=run["seed"],
        workers=run["workers"],
        source=text,
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
