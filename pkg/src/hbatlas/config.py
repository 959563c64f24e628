"""Run configuration: an INI file with typed, validated sections.

Example::

    [data]
    dataset = data/bullseye
    output = out/run1

    [model]
    bandlimit = 15      ; odd lattice size per axis (even values round down)
    T = 10
    alpha = 10.0
    k = 9.0
    beta = 0.1
    sigma = 0.05

    [hmc]
    samples = 10
    leapfrog = 10
    burn_in = 50
    step_size =         ; empty: step_scale * alpha at chain start
    step_scale = 0.01
    seed = 0

    [em]
    iterations = 20
    tolerance = 1e-4
    velocity_steps = 3
    velocity_step = 0.5

    [metrics]
    patch_sizes = 3, 5, 7
    n_patches = 3000
    seed = 0

    [run]
    workers = 1

Any key can be overridden on the command line as ``section.key=value``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .hmc_sampler import HmcConfig
from .mcem import McemConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"dataset": "", "output": ""},
    "model": {"bandlimit": "15", "T": "10", "alpha": "10.0", "k": "9.0", "beta": "0.1", "sigma": "0.05"},
    "hmc": {"samples": "10", "leapfrog": "10", "burn_in": "50", "step_size": "", "step_scale": "0.01",
            "seed": "0"},
    "em": {"iterations": "20", "tolerance": "1e-4", "velocity_steps": "3", "velocity_step": "0.5"},
    "metrics": {"patch_sizes": "3, 5, 7", "n_patches": "3000", "seed": "0"},
    "run": {"workers": "1"},
}


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    output: Path
    bandlimit: int = 15
    T: int = 10
    alpha: float = 10.0
    k: float = 9.0
    beta: float = 0.1
    sigma: float = 0.05
    samples: int = 10
    leapfrog: int = 10
    burn_in: int = 50
    step_size: float | None = None
    step_scale: float = 0.01
    seed: int = 0
    iterations: int = 20
    tolerance: float = 1e-4
    velocity_steps: int = 3
    velocity_step: float = 0.5
    patch_sizes: tuple = (3, 5, 7)
    n_patches: int = 3000
    metrics_seed: int = 0
    workers: int = 1
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def mcem_config(self) -> McemConfig:
        hmc = HmcConfig(n_samples=self.samples, n_leapfrog=self.leapfrog, burn_in=self.burn_in,
                        step_size=self.step_size, step_scale=self.step_scale, seed=self.seed)
        return McemConfig(em_iterations=self.iterations, tol=self.tolerance,
                          velocity_steps=self.velocity_steps, velocity_step=self.velocity_step,
                          T=self.T, hmc=hmc, alpha_init=self.alpha, k_init=self.k,
                          beta_init=self.beta, sigma_init=self.sigma)


def _parser():
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    return cp


def apply_overrides(cp, overrides):
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{name}")
        cp.set(section, name, value.strip())


def _get(cp, section, key, conv, check=None, what=""):
    raw = cp.get(section, key).strip()
    try:
        value = conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{section}.{key} = {raw!r}: must be {what}")
    return value


def _int_list(raw):
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _opt_float(raw):
    return None if raw == "" else float(raw)


def load_config(path=None, overrides=None, text=None) -> RunConfig:
    cp = _parser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
    if text is not None:
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    apply_overrides(cp, overrides)
    pos = (lambda x: x > 0), "positive"
    nonneg = (lambda x: x >= 0), "non-negative"
    nonempty = (lambda x: str(x) != "" and str(x) != "."), "a non-empty path"
    source = {s: dict(cp[s]) for s in cp.sections()}
    base = Path(path).parent if path is not None else Path(".")

    def path_of(key):
        raw = _get(cp, "data", key, str, *nonempty)
        p = Path(raw)
        return p if p.is_absolute() else base / p

    return RunConfig(
        dataset=path_of("dataset"),
        output=path_of("output"),
        bandlimit=_get(cp, "model", "bandlimit", int, lambda x: x >= 3, ">= 3"),
        T=_get(cp, "model", "T", int, *pos),
        alpha=_get(cp, "model", "alpha", float, *pos),
        k=_get(cp, "model", "k", float, *pos),
        beta=_get(cp, "model", "beta", float, *pos),
        sigma=_get(cp, "model", "sigma", float, *pos),
        samples=_get(cp, "hmc", "samples", int, *pos),
        leapfrog=_get(cp, "hmc", "leapfrog", int, *pos),
        burn_in=_get(cp, "hmc", "burn_in", int, *nonneg),
        step_size=_get(cp, "hmc", "step_size", _opt_float, lambda x: x is None or x > 0, "positive or empty"),
        step_scale=_get(cp, "hmc", "step_scale", float, *pos),
        seed=_get(cp, "hmc", "seed", int, *nonneg),
        iterations=_get(cp, "em", "iterations", int, *pos),
        tolerance=_get(cp, "em", "tolerance", float, *pos),
        velocity_steps=_get(cp, "em", "velocity_steps", int, *nonneg),
        velocity_step=_get(cp, "em", "velocity_step", float, *pos),
        patch_sizes=_get(cp, "metrics", "patch_sizes", _int_list, lambda x: len(x) > 0 and min(x) >= 2,
                         "a list of sizes >= 2"),
        n_patches=_get(cp, "metrics", "n_patches", int, *pos),
        metrics_seed=_get(cp, "metrics", "seed", int, *nonneg),
        workers=_get(cp, "run", "workers", int, *pos),
        source=source,
    )
