"""Strict JSON parsing for run configurations and phantom suite specs.

Unknown keys abort with ConfigError so ablation experiments cannot silently
misspell a toggle; absent keys take the documented defaults.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .objective import CharbonnierParams, LossWeights
from .phantom import DeformSpec, PhantomSpec
from .solver import SolveConfig
from .volumes import GridShape

RUN_CONFIG_KEYS = {
    "pyramid_levels", "iters_per_level", "stop_rel_tol", "lr", "seed",
    "ncc_window_per_level", "lambda1", "lambda2", "epsilon", "gamma",
    "trans", "anatomy_cyc", "diff_cyc", "cyc",
}
TOGGLE_KEYS = ("trans", "anatomy_cyc", "diff_cyc", "cyc")

PHANTOM_KEYS = {"shape", "num_structures", "contrast", "noise_sigma", "seed",
                "deform", "target_noise_sigma"}
DEFORM_KEYS = {"max_magnitude", "smoothness_sigma", "seed"}


def _load_json_object(path, what: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed {what} {path}: {e}")
    if not isinstance(obj, dict):
        raise ConfigError(f"{what} must be a JSON object")
    return obj


def _check_keys(obj: dict, allowed: set[str], what: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


def parse_run_config(obj: dict) -> SolveConfig:
    """Build a SolveConfig from a flat mapping; validates every field."""
    _check_keys(obj, RUN_CONFIG_KEYS, "run-config")
    for key in TOGGLE_KEYS:
        if key in obj and not isinstance(obj[key], bool):
            raise ConfigError(f"toggle {key!r} must be true or false")
    try:
        weights = LossWeights(
            lambda1=float(obj.get("lambda1", 10.0)),
            lambda2=float(obj.get("lambda2", 3.0)),
            trans=obj.get("trans", True),
            anatomy_cyc=obj.get("anatomy_cyc", True),
            diff_cyc=obj.get("diff_cyc", True),
            cyc=obj.get("cyc", True),
        )
        charb = CharbonnierParams(epsilon=float(obj.get("epsilon", 0.001)),
                                  gamma=float(obj.get("gamma", 0.45)))
        return SolveConfig(
            pyramid_levels=int(obj.get("pyramid_levels", 3)),
            iters_per_level=obj.get("iters_per_level"),
            stop_rel_tol=float(obj.get("stop_rel_tol", 1e-5)),
            lr=float(obj.get("lr", 0.05)),
            ncc_window_per_level=obj.get("ncc_window_per_level"),
            seed=int(obj.get("seed", 0)),
            weights=weights,
            charbonnier=charb,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid run-config value: {e}")


def load_run_config(path) -> SolveConfig:
    return parse_run_config(_load_json_object(path, "run config"))


def run_config_to_dict(cfg: SolveConfig) -> dict:
    """Flat mapping that parse_run_config round-trips."""
    return {
        "pyramid_levels": cfg.pyramid_levels,
        "iters_per_level": list(cfg.iters_per_level),
        "stop_rel_tol": cfg.stop_rel_tol,
        "lr": cfg.lr,
        "seed": cfg.seed,
        "ncc_window_per_level": list(cfg.ncc_window_per_level),
        "lambda1": cfg.weights.lambda1,
        "lambda2": cfg.weights.lambda2,
        "epsilon": cfg.charbonnier.epsilon,
        "gamma": cfg.charbonnier.gamma,
        "trans": cfg.weights.trans,
        "anatomy_cyc": cfg.weights.anatomy_cyc,
        "diff_cyc": cfg.weights.diff_cyc,
        "cyc": cfg.weights.cyc,
    }


def parse_phantom_spec(obj: dict) -> tuple[PhantomSpec, DeformSpec, float]:
    """Parse a phantom-suite spec: (atlas spec, deformation spec, target noise sigma)."""
    _check_keys(obj, PHANTOM_KEYS, "phantom-spec")
    if "shape" not in obj:
        raise ConfigError("phantom spec needs a 'shape' entry of three dims")
    shape = obj["shape"]
    if not (isinstance(shape, (list, tuple)) and len(shape) == 3):
        raise ConfigError(f"'shape' must be a list of three dims, got {shape!r}")
    deform_obj = obj.get("deform", {})
    if not isinstance(deform_obj, dict):
        raise ConfigError("'deform' must be a JSON object")
    _check_keys(deform_obj, DEFORM_KEYS, "deform-spec")
    try:
        spec = PhantomSpec(
            shape=GridShape(*(int(d) for d in shape)),
            num_structures=int(obj.get("num_structures", 4)),
            contrast=tuple(obj["contrast"]) if obj.get("contrast") is not None else None,
            noise_sigma=float(obj.get("noise_sigma", 0.02)),
            seed=int(obj.get("seed", 0)),
        )
        deform = DeformSpec(
            max_magnitude=float(deform_obj.get("max_magnitude", 3.0)),
            smoothness_sigma=float(deform_obj.get("smoothness_sigma", 6.0)),
            seed=int(deform_obj.get("seed", spec.seed + 1)),
        )
        target_noise = float(obj.get("target_noise_sigma", spec.noise_sigma))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid phantom-spec value: {e}")
    if target_noise < 0:
        raise ConfigError(f"target_noise_sigma must be >= 0, got {target_noise}")
    return spec, deform, target_noise


def load_phantom_spec(path) -> tuple[PhantomSpec, DeformSpec, float]:
    return parse_phantom_spec(_load_json_object(path, "phantom spec"))
