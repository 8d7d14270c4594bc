"""Experiment configuration schemas: JSON in, strict key checking, defaults
that match the acceptance settings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad experiment configuration (unknown keys, wrong values)."""


@dataclass
class GradcheckConfig:
    D: int = 4
    N: int = 3
    L: int = 3
    M: int = 2
    hidden: int = 8
    lam: float = 1e-3
    n_samples: int = 8
    n_coords: int = 220
    fd_step: float = 1e-5
    tol: float = 1e-5
    radius: float = 1.0
    kink_margin: float = 1e-4
    data_seed: int = 3
    seed: int = 9

    def validate(self):
        if min(self.D, self.N, self.L, self.M, self.hidden, self.n_coords) < 1:
            raise ConfigError("gradcheck dimensions must be positive")
        if self.D < 3:
            raise ConfigError("need D >= 3 for the sequence layout")
        if self.tol <= 0 or self.fd_step <= 0:
            raise ConfigError("tol and fd_step must be positive")


@dataclass
class SweepDiscConfig:
    axis: str = "M"
    grid: list = field(default_factory=lambda: [16, 64, 256, 1024])
    fixed: int = 64
    cloud: int = 64
    n_seeds: int = 8
    batch: int = 4
    d: int = 2
    N: int = 3
    hidden: int = 4
    b_x: float = 1.0
    radius: float = 1.0
    steps_per_knot: int = 2
    init: str = "ball"
    slope_lo: float = -0.7
    slope_hi: float = -0.3
    seed: int = 0

    @classmethod
    def depth_axis_defaults(cls) -> "SweepDiscConfig":
        return cls(axis="L", grid=[8, 16, 32, 64], fixed=1024,
                   slope_lo=-1.3, slope_hi=-0.7)

    def validate(self):
        if self.axis not in ("M", "L"):
            raise ConfigError("axis must be 'M' or 'L'")
        if not self.grid or any(int(v) < 1 for v in self.grid):
            raise ConfigError("grid must be a nonempty list of positive sizes")
        if self.init not in ("ball", "zero"):
            raise ConfigError("init must be 'ball' or 'zero'")
        if self.axis == "M" and self.cloud < 1:
            raise ConfigError("cloud size must be positive")
        if self.slope_lo >= self.slope_hi:
            raise ConfigError("slope band must be ordered")


@dataclass
class FlowClosenessConfig:
    grid: list = field(default_factory=lambda: [[8, 16], [16, 32], [32, 64]])
    ref_depth: int = 128
    ref_width: int = 256
    d: int = 2
    N: int = 4
    hidden: int = 4
    b_x: float = 1.0
    n_samples: int = 8
    n_seeds: int = 6
    lam: float = 1e-3
    dtau: float = 5e-3
    tau_end: float = 0.08
    radius: float = 1.0
    steps_per_knot: int = 1
    seed: int = 0

    def validate(self):
        if not self.grid:
            raise ConfigError("grid must be nonempty")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be positive")
        for pair in self.grid:
            if len(pair) != 2 or min(pair) < 1:
                raise ConfigError("grid entries must be (depth, width) pairs")
            if self.ref_depth % int(pair[0]) != 0:
                raise ConfigError("reference depth must refine every grid depth")
        if self.dtau <= 0 or self.tau_end < 0:
            raise ConfigError("need dtau > 0 and tau_end >= 0")


@dataclass
class ConvergeConfig:
    d: int = 2
    N: int = 8
    L: int = 8
    M: int = 16
    hidden: int = 8
    lam: float = 1e-4
    lam_hi: float = 1e-2
    dtau: float = 0.02
    n_steps: int = 2000
    n_seeds: int = 5
    sensitivity_seeds: int = 2
    n_samples: int = 32
    b_x: float = 1.0
    radius: float = 1.5
    target_ratio: float = 0.2
    seed: int = 0

    def validate(self):
        if self.n_steps < 1 or self.n_seeds < 1:
            raise ConfigError("step and seed counts must be positive")
        if not 1 <= self.sensitivity_seeds <= self.n_seeds:
            raise ConfigError("sensitivity_seeds must be in [1, n_seeds]")
        if not 0 < self.target_ratio < 1:
            raise ConfigError("target_ratio must be in (0, 1)")
        if self.lam_hi <= self.lam:
            raise ConfigError("lam_hi must exceed lam for the sensitivity check")


@dataclass
class W2DiagConfig:
    d: int = 2
    N: int = 4
    L: int = 8
    M: int = 16
    hidden: int = 4
    # strong decay makes the ensemble decelerate visibly inside the window,
    # separating the lag decades
    lam: float = 5.0
    dtau: float = 1e-3
    tau_end: float = 0.12
    deltas: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    n_samples: int = 16
    b_x: float = 1.0
    radius: float = 1.5
    stability_factor: float = 10.0
    seed: int = 0

    def validate(self):
        if not self.deltas:
            raise ConfigError("deltas must be nonempty")
        for delta in self.deltas:
            if delta < self.dtau - 1e-15:
                raise ConfigError("every lag must be at least one flow step")
            if delta > self.tau_end:
                raise ConfigError("lags must fit inside the trajectory")


@dataclass
class ProbeConfig:
    D: int = 3
    N: int = 2
    hidden: int = 6
    n_growth: int = 10000
    n_deriv: int = 200
    radius_T: float = 2.0
    radius_beta: float = 2.0
    seed: int = 0

    def validate(self):
        if self.n_growth < 1:
            raise ConfigError("sample count must be positive")
        if self.radius_T < 0 or self.radius_beta < 0:
            raise ConfigError("radii must be nonnegative")


SCHEMAS = {
    "gradcheck": GradcheckConfig,
    "sweep-disc": SweepDiscConfig,
    "flow-closeness": FlowClosenessConfig,
    "converge": ConvergeConfig,
    "w2-diag": W2DiagConfig,
    "probe": ProbeConfig,
}


def from_dict(experiment: str, obj: dict):
    """Build a config, rejecting unknown keys."""
    cls = SCHEMAS[experiment]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {experiment}: {', '.join(unknown)}")
    try:
        cfg = cls(**obj)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    cfg.validate()
    return cfg


def load(experiment: str, path=None, seed_override: int | None = None):
    """Load a config file (or defaults) for one experiment."""
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = from_dict(experiment, obj)
    if seed_override is not None:
        cfg.seed = seed_override
        cfg.validate()
    return cfg


def resolved_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
