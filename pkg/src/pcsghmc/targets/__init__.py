"""Built-in targets and the name/config registry used by the CLI."""

from __future__ import annotations

import re

import numpy as np

from pcsghmc.errors import ConfigError
from pcsghmc.targets.base import (Target, fd_gradient, rotated_gradient,
                                  rotated_potential, validate_rotation)
from pcsghmc.targets.gaussian import (GaussianTarget, anisotropic_gaussian,
                                      correlated_gaussian)
from pcsghmc.targets.shear import (ShearBuildingTarget, load_csv_column_table,
                                   toy_shear_target)

__all__ = [
    "Target", "GaussianTarget", "ShearBuildingTarget", "build_target",
    "correlated_gaussian", "anisotropic_gaussian", "toy_shear_target",
    "rotated_potential", "rotated_gradient", "validate_rotation", "fd_gradient",
]

_GAUSS_NAME = re.compile(r"^gauss(\d+)d(?:-rho([0-9.]+))?$")


def build_target(spec) -> Target:
    """Build a target from a registry name or a config mapping.

    Names: "gauss{D}d" (standard normal), "gauss{D}d-rho{r}" (equicorrelated,
    unit marginals), "gauss5d-aniso" (eigenvalues 25, 9, 4, 1, 0.25,
    axis-aligned), "shear2" (synthetic 2-story updating problem).
    Mappings use {"name": ...} or {"type": "gaussian"|"shear", ...}.
    """
    if isinstance(spec, str):
        return _by_name(spec)
    if not isinstance(spec, dict):
        raise ConfigError(f"target spec must be a name or mapping, got {type(spec).__name__}")
    spec = dict(spec)
    if "name" in spec and len(spec) == 1:
        return _by_name(spec["name"])
    kind = spec.pop("type", None)
    if kind == "gaussian":
        try:
            return GaussianTarget(spec["mean"], spec["cov"])
        except KeyError as exc:
            raise ConfigError(f"gaussian target needs {exc}") from exc
    if kind == "shear":
        return _shear_from_config(spec)
    raise ConfigError(f"unknown target type {kind!r}")


def _by_name(name: str) -> Target:
    m = _GAUSS_NAME.match(name)
    if m:
        dim = int(m.group(1))
        if dim < 1:
            raise ConfigError("gaussian dimension must be >= 1")
        if m.group(2) is None:
            return GaussianTarget(np.zeros(dim), np.eye(dim))
        return correlated_gaussian(dim, float(m.group(2)))
    if name == "gauss5d-aniso":
        return anisotropic_gaussian([25.0, 9.0, 4.0, 1.0, 0.25])
    if name == "shear2":
        return toy_shear_target(stories=2)
    raise ConfigError(f"unknown target name {name!r}")


def _shear_from_config(spec: dict) -> ShearBuildingTarget:
    if "toy_seed" in spec:
        return toy_shear_target(stories=int(spec.get("stories", 2)),
                                seed=int(spec["toy_seed"]),
                                n_t=int(spec.get("n_t", 240)),
                                dt=float(spec.get("dt", 0.01)))
    try:
        data = load_csv_column_table(spec["data_csv"])
        ag = load_csv_column_table(spec["excitation_csv"])[:, 0]
        kwargs = dict(masses=spec["masses"], k0=spec["k0"], dt=spec["dt"],
                      ground_accel=ag, data=data, sigma0=spec["sigma0"])
    except KeyError as exc:
        raise ConfigError(f"shear target config missing {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"shear target data not readable: {exc}") from exc
    for key in ("observed_dofs", "bounds", "stiffness_prior", "sigma_log_sd", "fd_step", "zeta"):
        if key in spec:
            kwargs[key] = spec[key]
    return ShearBuildingTarget(**kwargs)
