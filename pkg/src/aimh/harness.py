"""Experiment configuration, seeded parallel ensembles, and the CLI.

Config files use a strict plain-text key-value format (grammar in the README):
``[section]`` headers, ``[[kernel]]`` for the kernel list, and typed scalar
values.  Unknown keys are rejected with the offending line number.  Presets
ex1..ex4 fill in the constants of the four bundled experiments.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import shlex
import sys
from dataclasses import dataclass, field, asdict

import numpy as np

from . import core, diagnostics, proposals, targets
from .core import Box, child_seed, run_chain

PACKAGE_VERSION = "0.1.0"


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Config model
# ---------------------------------------------------------------------------

@dataclass
class TargetSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class KernelSpec:
    name: str
    params: dict = field(default_factory=dict)
    every: int = 0  # 0 = fallback kernel; k > 0 claims iterations i % k == 0


@dataclass
class DiagnosticsSpec:
    partition: str = "auto"          # auto | none
    partition_bins: int = 20
    snapshots: object = "geometric"  # "geometric" or explicit list of ints
    statistics: list = field(default_factory=lambda: ["tv", "acceptance"])
    trace_chains: int = 0
    burn_in: int = 500


@dataclass
class ExperimentConfig:
    target: TargetSpec
    kernels: list
    n_chains: int
    n_iterations: int
    seed: int
    threads: int = 1
    out_dir: str = "out"
    full_scale: bool = False
    preset: str | None = None
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)


# Parameter schemas: name -> {key: type}.  A tuple of types means any of them.
_NUM = (int, float)
TARGET_SCHEMAS = {
    "two_peak": {"alpha": _NUM},
    "gauss_mixture": {"r_inner": _NUM, "r_outer": _NUM, "sigma": _NUM,
                      "modes": list},
    "cauchy": {},
    "simulator_posterior": {"d": _NUM, "sigma2": _NUM, "simulator": str,
                            "timeout": _NUM},
}
KERNEL_SCHEMAS = {
    "uniform": {"lower": (list, *_NUM), "upper": (list, *_NUM)},
    "normal": {"mean": (list, *_NUM), "var": (list, *_NUM)},
    "uniform_walk": {"L": _NUM},
    "gaussian_walk": {"var": (list, *_NUM)},
    "two_mode": {"p": _NUM, "L": _NUM, "split": _NUM},
    "normal_mixture": {"nu0": (list, *_NUM), "lam0": (list, *_NUM),
                       "lamj": (list, *_NUM), "m0": int, "cap": int,
                       "eps1": _NUM, "tau0": _NUM},
    "suppressed_mixture": {"nu0": (list, *_NUM), "lam0": (list, *_NUM),
                           "lamj": (list, *_NUM), "m0": int, "cap": int,
                           "eps1": _NUM, "tau0": _NUM, "n0": int,
                           "n_cap": int, "eps2": _NUM, "delta": _NUM,
                           "exponent": _NUM, "c_init": _NUM},
    "surrogate": {"d": _NUM, "sigma2": _NUM, "widening": _NUM, "n_min": int,
                  "ridge": _NUM},
    "doeblin_wrap": {"eps": _NUM, "inner": str, "inner_mean": (list, *_NUM),
                     "inner_var": (list, *_NUM), "tail": str,
                     "tail_loc": (list, *_NUM), "tail_scale": (list, *_NUM),
                     "tail_dof": _NUM, "floor_ratio": _NUM},
}
STATISTIC_NAMES = {"tv", "acceptance", "mode_jumps", "regeneration",
                   "base_fraction", "tv_bound", "tv_time_avg"}


# ---------------------------------------------------------------------------
# Presets (constants of the four bundled experiments)
# ---------------------------------------------------------------------------

def _preset_config(name: str) -> ExperimentConfig:
    if name == "ex1":
        return ExperimentConfig(
            target=TargetSpec("two_peak", {"alpha": 2000.0}),
            kernels=[KernelSpec("two_mode", {"p": 0.4, "L": 0.02})],
            n_chains=2000, n_iterations=3000, seed=1,
            diagnostics=DiagnosticsSpec(
                partition_bins=20,
                statistics=["tv", "acceptance", "mode_jumps"]))
    if name == "ex2":
        return ExperimentConfig(
            target=TargetSpec("gauss_mixture",
                              {"r_inner": 0.05, "r_outer": 1.5,
                               "sigma": 0.01}),
            kernels=[KernelSpec("normal_mixture",
                                {"nu0": [0.0, 0.0], "lam0": [1.0, 1.0],
                                 "lamj": [0.0009, 0.0009], "m0": 20,
                                 "cap": 25, "eps1": 0.05})],
            n_chains=2000, n_iterations=3000, seed=2,
            diagnostics=DiagnosticsSpec(
                statistics=["tv", "acceptance", "base_fraction"]))
    if name == "ex3":
        return ExperimentConfig(
            target=TargetSpec("cauchy", {}),
            kernels=[KernelSpec("normal_mixture",
                                {"nu0": 0.0, "lam0": 1.0, "lamj": 0.25,
                                 "m0": 70, "cap": 80, "eps1": 0.05})],
            n_chains=2000, n_iterations=2000, seed=3,
            diagnostics=DiagnosticsSpec(
                partition_bins=20, statistics=["tv", "acceptance"]))
    if name == "ex4":
        return ExperimentConfig(
            target=TargetSpec("simulator_posterior",
                              {"d": 2.5, "sigma2": 0.005}),
            kernels=[KernelSpec("surrogate",
                                {"d": 2.5, "sigma2": 0.005, "widening": 5.0})],
            n_chains=1, n_iterations=50000, seed=4,
            diagnostics=DiagnosticsSpec(
                partition="none", statistics=["acceptance"], trace_chains=1))
    raise ConfigError(f"unknown preset {name!r}")


_FULL_SCALE_CHAINS = {"ex1": 10000, "ex2": 20000, "ex3": 10000, "ex4": 1}


# ---------------------------------------------------------------------------
# Config text format
# ---------------------------------------------------------------------------

def _parse_scalar(text: str, lineno: int):
    text = text.strip()
    if not text:
        raise ConfigError("empty value", lineno)
    if text.startswith('"'):
        if not text.endswith('"') or len(text) < 2:
            raise ConfigError(f"unterminated string {text!r}", lineno)
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"unterminated list {text!r}", lineno)
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, lineno) for part in inner.split(",")]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse value {text!r}", lineno) from None


def _raw_sections(text: str):
    """Yield (section_name, is_list_item, [(lineno, key, value), ...])."""
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[["):
            if not line.endswith("]]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            current = (line[2:-2].strip(), True, lineno, [])
            sections.append(current)
        elif line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            current = (line[1:-1].strip(), False, lineno, [])
            sections.append(current)
        else:
            if "=" not in line:
                raise ConfigError(f"expected key = value, got {line!r}", lineno)
            if current is None:
                raise ConfigError("key outside any section", lineno)
            key, _, value = line.partition("=")
            current[3].append((lineno, key.strip(),
                               _parse_scalar(value, lineno)))
    return sections


def _check_type(value, expected, key: str, lineno: int):
    if not isinstance(expected, tuple):
        expected = (expected,)
    if bool in expected and isinstance(value, bool):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"key {key!r}: expected number, got boolean", lineno)
    if float in expected and isinstance(value, int):
        return value
    if not isinstance(value, tuple(t for t in expected if t is not bool)):
        names = "/".join(t.__name__ for t in expected)
        raise ConfigError(
            f"key {key!r}: expected {names}, got {type(value).__name__}",
            lineno)
    return value


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config document; strict about unknown keys."""
    sections = _raw_sections(text)
    experiment: dict = {}
    exp_lines: dict = {}
    target_spec = None
    kernel_specs: list[KernelSpec] = []
    diag_kv: dict = {}

    for name, is_list, header_line, items in sections:
        if name == "experiment" and not is_list:
            for lineno, key, value in items:
                if key not in ("preset", "n_chains", "n_iterations", "seed",
                               "threads", "out_dir", "full_scale"):
                    raise ConfigError(f"unknown key {key!r} in [experiment]",
                                      lineno)
                experiment[key] = value
                exp_lines[key] = lineno
        elif name == "target" and not is_list:
            kv = {}
            name_val = None
            for lineno, key, value in items:
                if key == "name":
                    name_val = _check_type(value, str, key, lineno)
                    if name_val not in TARGET_SCHEMAS:
                        raise ConfigError(f"unknown target {name_val!r}",
                                          lineno)
                    continue
                kv[key] = (lineno, value)
            if name_val is None:
                raise ConfigError("missing target name", header_line)
            schema = TARGET_SCHEMAS[name_val]
            params = {}
            for key, (lineno, value) in kv.items():
                if key not in schema:
                    raise ConfigError(
                        f"unknown key {key!r} for target {name_val!r}", lineno)
                params[key] = _check_type(value, schema[key], key, lineno)
            target_spec = TargetSpec(name_val, params)
        elif name == "kernel" and is_list:
            kv = {}
            name_val = None
            every = 0
            for lineno, key, value in items:
                if key == "name":
                    name_val = _check_type(value, str, key, lineno)
                    if name_val not in KERNEL_SCHEMAS:
                        raise ConfigError(f"unknown kernel {name_val!r}",
                                          lineno)
                    continue
                if key == "every":
                    every = _check_type(value, int, key, lineno)
                    if every < 0:
                        raise ConfigError("'every' must be >= 0", lineno)
                    continue
                kv[key] = (lineno, value)
            if name_val is None:
                raise ConfigError("missing kernel name", header_line)
            schema = KERNEL_SCHEMAS[name_val]
            params = {}
            for key, (lineno, value) in kv.items():
                if key not in schema:
                    raise ConfigError(
                        f"unknown key {key!r} for kernel {name_val!r}", lineno)
                params[key] = _check_type(value, schema[key], key, lineno)
            kernel_specs.append(KernelSpec(name_val, params, every))
        elif name == "diagnostics" and not is_list:
            for lineno, key, value in items:
                if key not in ("partition", "partition_bins", "snapshots",
                               "statistics", "trace_chains", "burn_in"):
                    raise ConfigError(f"unknown key {key!r} in [diagnostics]",
                                      lineno)
                diag_kv[key] = (lineno, value)
        else:
            kind = "[[{}]]".format(name) if is_list else "[{}]".format(name)
            raise ConfigError(f"unknown section {kind}", header_line)

    preset_name = experiment.get("preset")
    if preset_name is not None:
        if not isinstance(preset_name, str):
            raise ConfigError("preset must be a string",
                              exp_lines.get("preset"))
        try:
            config = _preset_config(preset_name)
        except ConfigError as exc:
            raise ConfigError(str(exc), exp_lines.get("preset")) from None
        config.preset = preset_name
    else:
        if target_spec is None:
            raise ConfigError("missing target")
        config = ExperimentConfig(target=TargetSpec("", {}), kernels=[],
                                  n_chains=0, n_iterations=0, seed=0)

    if target_spec is not None:
        config.target = target_spec
    if kernel_specs:
        config.kernels = kernel_specs

    for key in ("n_chains", "n_iterations", "seed", "threads"):
        if key in experiment:
            setattr(config, key,
                    _check_type(experiment[key], int, key, exp_lines[key]))
    if "out_dir" in experiment:
        config.out_dir = _check_type(experiment["out_dir"], str, "out_dir",
                                     exp_lines["out_dir"])
    if "full_scale" in experiment:
        config.full_scale = _check_type(experiment["full_scale"], bool,
                                        "full_scale", exp_lines["full_scale"])

    diag = config.diagnostics
    for key, (lineno, value) in diag_kv.items():
        if key == "partition":
            value = _check_type(value, str, key, lineno)
            if value not in ("auto", "none"):
                raise ConfigError(f"partition must be auto or none", lineno)
        elif key == "snapshots":
            if isinstance(value, str):
                if value != "geometric":
                    raise ConfigError(
                        "snapshots must be \"geometric\" or a list", lineno)
            elif isinstance(value, list):
                value = [_check_type(v, int, key, lineno) for v in value]
            else:
                raise ConfigError(
                    "snapshots must be \"geometric\" or a list", lineno)
        elif key == "statistics":
            value = [_check_type(v, str, key, lineno) for v in
                     _check_type(value, list, key, lineno)]
            for v in value:
                if v not in STATISTIC_NAMES:
                    raise ConfigError(f"unknown statistic {v!r}", lineno)
        else:
            value = _check_type(value, int, key, lineno)
        setattr(diag, key, value)

    _validate_config(config)
    return config


def _validate_config(config: ExperimentConfig):
    if not config.target.name:
        raise ConfigError("missing target")
    if not config.kernels:
        raise ConfigError("missing kernel")
    if config.n_chains < 1:
        raise ConfigError("n_chains must be >= 1")
    if config.n_iterations < 0:
        raise ConfigError("n_iterations must be >= 0")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    fallbacks = [k for k in config.kernels if k.every == 0]
    if len(fallbacks) != 1:
        raise ConfigError("exactly one kernel must have no 'every' schedule")
    if config.diagnostics.trace_chains < 0:
        raise ConfigError("trace_chains must be >= 0")


def emit_config(config: ExperimentConfig) -> str:
    """Serialize a config; parse(emit_config(c)) == c."""
    def fmt(value):
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, str):
            return f'"{value}"'
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, list):
            return "[" + ", ".join(fmt(v) for v in value) + "]"
        return str(value)

    lines = ["[experiment]"]
    if config.preset is not None:
        lines.append(f'preset = "{config.preset}"')
    lines.append(f"n_chains = {config.n_chains}")
    lines.append(f"n_iterations = {config.n_iterations}")
    lines.append(f"seed = {config.seed}")
    lines.append(f"threads = {config.threads}")
    lines.append(f'out_dir = "{config.out_dir}"')
    lines.append(f"full_scale = {fmt(config.full_scale)}")
    lines.append("")
    lines.append("[target]")
    lines.append(f'name = "{config.target.name}"')
    for key in sorted(config.target.params):
        lines.append(f"{key} = {fmt(config.target.params[key])}")
    for spec in config.kernels:
        lines.append("")
        lines.append("[[kernel]]")
        lines.append(f'name = "{spec.name}"')
        if spec.every:
            lines.append(f"every = {spec.every}")
        for key in sorted(spec.params):
            lines.append(f"{key} = {fmt(spec.params[key])}")
    d = config.diagnostics
    lines.append("")
    lines.append("[diagnostics]")
    lines.append(f'partition = "{d.partition}"')
    lines.append(f"partition_bins = {d.partition_bins}")
    lines.append(f"snapshots = {fmt(d.snapshots)}")
    lines.append(f"statistics = {fmt(list(d.statistics))}")
    lines.append(f"trace_chains = {d.trace_chains}")
    lines.append(f"burn_in = {d.burn_in}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builders: config -> runtime objects
# ---------------------------------------------------------------------------

@dataclass
class TargetBundle:
    target: core.TargetDensity
    initial_distribution: object
    mode_points: object            # for crossing statistics, or None
    partition: object              # BinPartition or None
    evaluator: object = None       # external evaluator to close after a run


def build_target(config: ExperimentConfig, with_partition: bool = True) -> TargetBundle:
    spec = config.target
    p = spec.params
    bins = config.diagnostics.partition_bins
    want_part = with_partition and config.diagnostics.partition == "auto"
    if spec.name == "two_peak":
        target = targets.Example1Target(alpha=float(p.get("alpha", 2000.0)))
        init = lambda rng: rng.uniform(0.0, 1.0)  # noqa: E731
        part = diagnostics.ex1_partition(target, bins) if want_part else None
        return TargetBundle(target, init, list(target.modes), part)
    if spec.name == "gauss_mixture":
        if "modes" in p:
            flat = np.asarray(p["modes"], dtype=float)
            layout = flat.reshape(-1, 2)
        else:
            layout = targets.gauss13_layout(float(p.get("r_inner", 0.05)),
                                            float(p.get("r_outer", 1.5)))
        sigma = float(p.get("sigma", 0.01))
        target = targets.GaussMixtureTarget(layout, variances=sigma ** 2)
        init = lambda rng: rng.standard_normal(2)  # noqa: E731
        part = diagnostics.gauss13_partition(target) if want_part else None
        return TargetBundle(target, init, layout, part)
    if spec.name == "cauchy":
        target = targets.CauchyTarget()
        init = lambda rng: rng.standard_normal()  # noqa: E731
        part = diagnostics.cauchy_partition(bins) if want_part else None
        return TargetBundle(target, init, None, part)
    if spec.name == "simulator_posterior":
        evaluator = None
        if "simulator" in p:
            evaluator = targets.ExternalEvaluator.spawn(
                shlex.split(p["simulator"]),
                timeout=float(p.get("timeout", 30.0)))
        target = targets.Example4Target(d=float(p.get("d", 2.5)),
                                        sigma2=float(p.get("sigma2", 0.005)),
                                        evaluator=evaluator)
        init = lambda rng: rng.uniform(np.zeros(5), np.ones(5))  # noqa: E731
        return TargetBundle(target, init, None, None, evaluator=evaluator)
    raise ConfigError(f"unknown target {spec.name!r}")


def build_kernel(spec: KernelSpec, bundle: TargetBundle) -> proposals.ProposalKernel:
    p = spec.params
    target = bundle.target
    dim = target.dim

    def vec(value, default=None):
        v = p.get(value, default)
        return np.asarray(v, dtype=float) if isinstance(v, list) else v

    if spec.name == "uniform":
        if "lower" in p or "upper" in p:
            box = Box(vec("lower", 0.0), vec("upper", 1.0))
        elif isinstance(target.support, Box):
            box = target.support
        else:
            raise ConfigError("uniform kernel needs bounds for this target")
        return proposals.UniformIndependenceKernel(box)
    if spec.name == "normal":
        mean = vec("mean", 0.0 if dim == 1 else [0.0] * dim)
        var = vec("var", 1.0)
        return proposals.GaussianIndependenceKernel(mean, var)
    if spec.name == "uniform_walk":
        if not isinstance(target.support, Box):
            raise ConfigError("uniform_walk kernel needs a box support")
        return proposals.UniformWalkKernel(float(p.get("L", 0.1)),
                                           target.support)
    if spec.name == "gaussian_walk":
        var = vec("var", 1.0)
        var = np.broadcast_to(np.atleast_1d(np.asarray(var, float)),
                              (dim,)).copy()
        return proposals.GaussianWalkKernel(var)
    if spec.name == "two_mode":
        box = target.support if isinstance(target.support, Box) else Box(0, 1)
        return proposals.TwoModeAdaptiveKernel(
            float(p.get("p", 0.4)), float(p.get("L", 0.02)), box,
            split=float(p.get("split", 0.5)))
    if spec.name in ("normal_mixture", "suppressed_mixture"):
        nu0 = vec("nu0", 0.0 if dim == 1 else [0.0] * dim)
        lam0 = vec("lam0", 1.0)
        lamj = vec("lamj", 0.0009)
        common = dict(nu0=nu0, lam0=lam0, lamj=lamj,
                      m0=int(p.get("m0", 20)), cap=int(p.get("cap", 25)),
                      spacing=float(p.get("eps1", 0.05)),
                      tau0=float(p.get("tau0", 0.5)))
        if spec.name == "normal_mixture":
            return proposals.NormalMixtureKernel(**common)
        return proposals.SuppressedMixtureKernel(
            **common, n0=int(p.get("n0", 1000)), n_cap=int(p.get("n_cap", 1000)),
            eps2=float(p.get("eps2", 0.05)), delta=float(p.get("delta", 0.1)),
            score_exponent=float(p.get("exponent", 1.3)),
            c_init=float(p.get("c_init", 2.0)))
    if spec.name == "surrogate":
        return proposals.SurrogateKernel(
            d=float(p.get("d", 2.5)), sigma2=float(p.get("sigma2", 0.005)),
            widening=float(p.get("widening", 5.0)),
            box=target.support if isinstance(target.support, Box) else None,
            n_min=int(p.get("n_min", 10)), ridge=float(p.get("ridge", 1e-8)))
    if spec.name == "doeblin_wrap":
        inner_name = p.get("inner", "uniform")
        if inner_name == "uniform":
            inner = proposals.UniformIndependenceKernel(
                Box(vec("inner_mean", 0.0), vec("inner_var", 1.0))
                if "inner_mean" in p else target.support)
        elif inner_name == "normal":
            inner = proposals.GaussianIndependenceKernel(
                vec("inner_mean", 0.0 if dim == 1 else [0.0] * dim),
                vec("inner_var", 1.0))
        else:
            raise ConfigError(f"unknown inner kernel {inner_name!r}")
        tail_name = p.get("tail", "student_t")
        if tail_name == "uniform":
            if not isinstance(target.support, Box):
                raise ConfigError("uniform tail needs a box support")
            tail = proposals.UniformIndependenceKernel(target.support)
        elif tail_name == "student_t":
            tail = proposals.StudentTKernel(
                vec("tail_loc", 0.0 if dim == 1 else [0.0] * dim),
                vec("tail_scale", 1.0), dof=float(p.get("tail_dof", 1.0)))
        else:
            raise ConfigError(f"unknown tail kernel {tail_name!r}")
        return proposals.DoeblinMixtureKernel(
            inner, float(p.get("eps", 0.05)), tail,
            tail_floor_ratio=p.get("floor_ratio"))
    raise ConfigError(f"unknown kernel {spec.name!r}")


def build_schedule(config: ExperimentConfig, bundle: TargetBundle):
    """Fresh kernels for one chain plus the iteration -> kernel map."""
    kernels = [build_kernel(spec, bundle) for spec in config.kernels]
    if len(kernels) == 1:
        return kernels, kernels[0]
    scheduled = [(spec.every, k) for spec, k in zip(config.kernels, kernels)
                 if spec.every > 0]
    fallback = next(k for spec, k in zip(config.kernels, kernels)
                    if spec.every == 0)

    def schedule(i: int):
        for every, kernel in scheduled:
            if i % every == 0:
                return kernel
        return fallback

    return kernels, schedule


def snapshot_iterations(config: ExperimentConfig) -> list[int]:
    spec = config.diagnostics.snapshots
    n = config.n_iterations
    if isinstance(spec, list):
        points = sorted({int(s) for s in spec if 0 < int(s) <= n})
        return points
    points = set()
    k = 1
    while k <= n:
        points.add(k)
        k *= 2
    if n > 0:
        points.add(n)
    return sorted(points)


# ---------------------------------------------------------------------------
# Ensemble execution
# ---------------------------------------------------------------------------

@dataclass
class ChainOutcome:
    index: int
    ok: bool = True
    error: str | None = None
    n_iterations: int = 0
    n_accepted: int = 0
    n_independent: int = 0
    n_regenerations: int = 0
    final_state: object = None
    snapshots: dict = field(default_factory=dict)
    crossings: int | None = None
    base_fraction: float | None = None
    regen_states: list = field(default_factory=list)
    doeblin_a: float | None = None
    trace: object = None


def _run_single_chain(config: ExperimentConfig, bundle: TargetBundle,
                      index: int) -> ChainOutcome:
    out = ChainOutcome(index=index)
    stats = set(config.diagnostics.statistics)
    snaps = set(snapshot_iterations(config))
    keep_trace = index < config.diagnostics.trace_chains
    kernels, schedule = build_schedule(config, bundle)
    want_cross = "mode_jumps" in stats and bundle.mode_points is not None
    want_regen = "regeneration" in stats
    side = None
    crossings = 0
    if want_cross:
        modes_arr = np.asarray(bundle.mode_points, dtype=float)
        if modes_arr.ndim == 1 and modes_arr.size == 2:
            mid = 0.5 * float(modes_arr.sum())
            side_of = lambda s: s > mid  # noqa: E731
        else:
            side_of = lambda s: int(np.argmin(  # noqa: E731
                ((modes_arr - np.asarray(s)) ** 2).sum(axis=-1)))

    def observer(chain, rec):
        nonlocal side, crossings
        i = rec.iteration
        if i in snaps:
            out.snapshots[i] = rec.state
        if want_regen and rec.regenerated:
            out.regen_states.append(rec.state)
        if want_cross:
            s = side_of(rec.state)
            if side is not None and s != side:
                crossings += 1
            side = s

    try:
        trace = run_chain(bundle.target, schedule, bundle.initial_distribution,
                          config.n_iterations,
                          child_seed(config.seed, index),
                          keep_records=keep_trace, observer=observer)
    except Exception as exc:  # per-chain failures do not stop the ensemble
        out.ok = False
        out.error = f"{type(exc).__name__}: {exc}"
        return out
    out.n_iterations = trace.n_iterations
    out.n_accepted = trace.n_accepted
    out.n_independent = trace.n_independent
    out.n_regenerations = trace.n_regenerations
    out.final_state = trace.final_state
    out.crossings = crossings if want_cross else None
    if keep_trace:
        out.trace = trace
    empty = core.History()
    for kernel in kernels:
        if isinstance(kernel, proposals.SuppressedMixtureKernel):
            out.base_fraction = kernel.base_fraction()
        bound = kernel.doeblin_bound(empty)
        if bound is not None:
            out.doeblin_a = bound
    return out


def _run_batch(config: ExperimentConfig, lo: int, hi: int) -> list[ChainOutcome]:
    bundle = build_target(config, with_partition=False)
    try:
        return [_run_single_chain(config, bundle, i) for i in range(lo, hi)]
    finally:
        if bundle.evaluator is not None:
            bundle.evaluator.close()


@dataclass
class ResultBundle:
    config: ExperimentConfig
    outcomes: list
    partition: object
    snapshots: list
    noise_floor: float | None = None

    def snapshot_states(self, iteration: int) -> np.ndarray:
        states = [o.snapshots[iteration] for o in self.outcomes
                  if o.ok and iteration in o.snapshots]
        return np.asarray(states)

    def tv_series(self):
        if self.partition is None:
            return []
        return [(i, diagnostics.tv_binned(self.snapshot_states(i),
                                          self.partition))
                for i in self.snapshots]

    def mean_acceptance(self) -> float:
        rates = [o.n_accepted / o.n_iterations for o in self.outcomes
                 if o.ok and o.n_iterations]
        return float(np.mean(rates)) if rates else math.nan


def run_ensemble(config: ExperimentConfig) -> ResultBundle:
    """Run n_chains independent chains; deterministic for a fixed seed
    regardless of worker count (chains are keyed by index)."""
    if config.full_scale and config.preset in _FULL_SCALE_CHAINS:
        config = _with_chains(config, _FULL_SCALE_CHAINS[config.preset])
    n = config.n_chains
    workers = max(1, config.threads)
    if workers == 1 or n < 2 * workers:
        outcomes = _run_batch(config, 0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        outcomes = [None] * n
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_batch, config, int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:])
                       if hi > lo]
            for fut in concurrent.futures.as_completed(futures):
                for out in fut.result():
                    outcomes[out.index] = out
    bundle = build_target(config)
    if bundle.evaluator is not None:
        bundle.evaluator.close()
    result = ResultBundle(config, list(outcomes), bundle.partition,
                          snapshot_iterations(config))
    if result.partition is not None and "tv" in config.diagnostics.statistics:
        result.noise_floor = diagnostics.noise_floor(
            result.partition, config.n_chains,
            seed=_noise_floor_seed(config.seed))
    return result


def _noise_floor_seed(master_seed: int) -> int:
    return int(np.random.SeedSequence(
        master_seed, spawn_key=(0x0F10,)).generate_state(1)[0])


def _with_chains(config: ExperimentConfig, n: int) -> ExperimentConfig:
    import copy
    config = copy.deepcopy(config)
    config.n_chains = n
    return config


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _state_columns(state) -> list:
    if isinstance(state, (float, int)):
        return [state]
    return list(np.asarray(state, dtype=float))


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def emit_outputs(result: ResultBundle, out_dir: str) -> list[str]:
    """Write the CSV files and the JSON run manifest; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    config = result.config
    stats = set(config.diagnostics.statistics)
    written = []

    if "tv" in stats and result.partition is not None:
        a = _ensemble_doeblin_a(result)
        rows = []
        for i, tv in result.tv_series():
            bound = 2.0 * (1.0 - a) ** i if a is not None else None
            rows.append((i, tv, result.noise_floor, bound))
        path = os.path.join(out_dir, "convergence.csv")
        _write_csv(path, ["iteration", "tv", "noise_floor", "tv_bound"], rows)
        written.append(path)

    if "acceptance" in stats:
        rows = [(o.index, o.n_accepted, o.n_iterations,
                 o.n_accepted / o.n_iterations if o.n_iterations else 0.0)
                for o in result.outcomes if o.ok]
        path = os.path.join(out_dir, "acceptance.csv")
        _write_csv(path, ["chain", "accepted", "iterations", "rate"], rows)
        written.append(path)

    if "mode_jumps" in stats:
        rows = [(o.index, o.crossings) for o in result.outcomes
                if o.ok and o.crossings is not None]
        if rows:
            path = os.path.join(out_dir, "mode_jumps.csv")
            _write_csv(path, ["chain", "crossings"], rows)
            written.append(path)

    for o in result.outcomes[:config.diagnostics.trace_chains]:
        if not o.ok or o.trace is None:
            continue
        dim = config_dim(result)
        header = (["iteration"] + [f"proposal_{j}" for j in range(dim)]
                  + ["alpha", "accepted", "independent", "regenerated"]
                  + [f"state_{j}" for j in range(dim)])
        t = o.trace
        rows = []
        for k in range(t.n_iterations):
            rows.append([k + 1] + _state_columns(t.proposals[k])
                        + [t.alphas[k], t.accepted[k], t.independent[k],
                           t.regenerated[k]] + _state_columns(t.states[k]))
        path = os.path.join(out_dir, f"trace_{o.index}.csv")
        _write_csv(path, header, rows)
        written.append(path)

    manifest = {
        "config": config_to_dict(config),
        "seed": config.seed,
        "versions": {"aimh": PACKAGE_VERSION,
                     "python": sys.version.split()[0],
                     "numpy": np.__version__},
        "noise_floor": result.noise_floor,
        "chains": [{"index": o.index, "ok": o.ok, "error": o.error,
                    "accepted": o.n_accepted,
                    "iterations": o.n_iterations,
                    "independent": o.n_independent,
                    "regenerations": o.n_regenerations,
                    "base_fraction": o.base_fraction}
                   for o in result.outcomes],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written


def config_dim(result: ResultBundle) -> int:
    name = result.config.target.name
    return {"two_peak": 1, "gauss_mixture": 2, "cauchy": 1,
            "simulator_posterior": 5}[name]


def _ensemble_doeblin_a(result: ResultBundle):
    values = [o.doeblin_a for o in result.outcomes
              if o.ok and o.doeblin_a is not None]
    return min(values) if values else None


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_config(path: str, args) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        config = parse_config(fh.read())
    if args.seed is not None:
        config.seed = args.seed
    if args.chains is not None:
        config.n_chains = args.chains
    if args.iterations is not None:
        config.n_iterations = args.iterations
    if args.threads is not None:
        config.threads = args.threads
    elif os.environ.get("AIMH_THREADS"):
        config.threads = int(os.environ["AIMH_THREADS"])
    if args.out is not None:
        config.out_dir = args.out
    if getattr(args, "full_scale", False):
        config.full_scale = True
    _validate_config(config)
    return config


def _precheck_out_dir(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    probe = os.path.join(out_dir, ".write_probe")
    with open(probe, "w") as fh:
        fh.write("")
    os.remove(probe)


def cmd_run(args) -> int:
    config = _load_config(args.config, args)
    _precheck_out_dir(config.out_dir)
    result = run_ensemble(config)
    emit_outputs(result, config.out_dir)
    failed = [o for o in result.outcomes if not o.ok]
    if failed:
        print(f"{len(failed)} of {len(result.outcomes)} chains failed; "
              f"see manifest.json", file=sys.stderr)
        return 2
    return 0


def cmd_compare(args) -> int:
    configs = [_load_config(path, args) for path in args.configs]
    names = []
    for path, config in zip(args.configs, configs):
        base = os.path.splitext(os.path.basename(path))[0]
        names.append(base if base not in names else f"{base}_{len(names)}")
    if len({c.target.name for c in configs}) != 1:
        raise ConfigError("compare requires configs sharing one target")
    out_dir = configs[0].out_dir
    _precheck_out_dir(out_dir)
    results = [run_ensemble(c) for c in configs]
    series = {}
    iters = None
    for name, result in zip(names, results):
        tv = result.tv_series()
        series[name] = dict(tv)
        pts = [i for i, _ in tv]
        iters = pts if iters is None else sorted(set(iters) & set(pts))
    rows = [[i] + [series[name].get(i) for name in names]
            for i in (iters or [])]
    path = os.path.join(out_dir, "compare.csv")
    _write_csv(path, ["iteration"] + [f"tv_{n}" for n in names], rows)
    for name, result in zip(names, results):
        emit_outputs(result, os.path.join(out_dir, name))
    return 0


def cmd_diagnose(args) -> int:
    config = _load_config(args.config, args)
    _precheck_out_dir(config.out_dir)
    bundle = build_target(config)
    rows = []
    for k, spec in enumerate(config.kernels):
        kernel = build_kernel(spec, bundle)
        a = None
        n_pts = 0
        if (kernel.is_independent(1) and kernel.normalized
                and bundle.target.log_norm_const is not None):
            points = _doeblin_candidates(bundle)
            est = diagnostics.doeblin_estimate(kernel, bundle.target, points)
            a, n_pts = est.a, est.n_points
        bound_n = (2.0 * (1.0 - a) ** config.n_iterations
                   if a is not None else None)
        floor = (diagnostics.noise_floor(bundle.partition, config.n_chains,
                                         seed=_noise_floor_seed(config.seed))
                 if bundle.partition is not None else None)
        rows.append((k, spec.name, a, n_pts, floor, bound_n))
    path = os.path.join(config.out_dir, "diagnose.csv")
    _write_csv(path, ["kernel_index", "kernel", "doeblin_a",
                      "candidate_points", "noise_floor",
                      "tv_bound_at_n_iterations"], rows)
    if bundle.evaluator is not None:
        bundle.evaluator.close()
    return 0


def _doeblin_candidates(bundle: TargetBundle) -> list:
    target = bundle.target
    if isinstance(target.support, Box) and target.dim == 1:
        lo, hi = target.support._lo0, target.support._hi0
        pts = list(np.linspace(lo, hi, 20001)[1:-1])
        if bundle.mode_points:
            pts.extend(bundle.mode_points)
        return pts
    if target.dim == 1:
        return list(np.linspace(-50.0, 50.0, 20001))
    grid = np.linspace(-3.0, 3.0, 101)
    pts = [np.array([a, b]) for a in grid for b in grid]
    if bundle.mode_points is not None:
        pts.extend(np.asarray(m) for m in bundle.mode_points)
    return pts


def cmd_stub_simulator(_args) -> int:
    return targets.run_stub_simulator()


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aimh",
        description="Adaptive independence sampler experiments")
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--chains", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--full-scale", action="store_true", dest="full_scale")

    p_run = sub.add_parser("run", help="run an experiment and emit outputs")
    p_run.add_argument("config")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="run several kernel configs on one target")
    p_cmp.add_argument("configs", nargs="+")
    add_common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_diag = sub.add_parser("diagnose",
                            help="Doeblin bound, TV bound and noise floor")
    p_diag.add_argument("config")
    add_common(p_diag)
    p_diag.set_defaults(func=cmd_diagnose)

    p_stub = sub.add_parser("stub-simulator",
                            help="serve the built-in response function over "
                                 "the line protocol")
    p_stub.set_defaults(func=cmd_stub_simulator)
    return parser


def cli(argv=None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
