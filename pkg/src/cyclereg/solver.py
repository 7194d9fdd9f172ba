"""Adam-driven coarse-to-fine minimization of the composite objective.

One solve optimizes the forward and backward displacement fields of a single
atlas/target pair, jointly, over a box-downsampled resolution pyramid. Fields
start at zero on the coarsest level and are trilinearly prolonged upward.
A level stops early once the objective stagnates over a 20-iteration window.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError
from .objective import CharbonnierParams, LossWeights, _composite_eval
from .volumes import (GridShape, LabelVolume, ScalarVolume, downsample_box2,
                      one_hot_encode, upsample_field_2x)
from .warp import DisplacementField

STOP_WINDOW = 20  # iterations between the two objective samples of the stagnation test


@dataclass(frozen=True)
class AdamState:
    """Moment accumulators and hyperparameters of one Adam-optimized tensor."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, lr: float = 0.0002, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(like), v=np.zeros_like(like), step=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps_adam=eps_adam)


def _adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState,
                 lr_scale: float = 1.0) -> tuple[np.ndarray, AdamState]:
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * lr_scale * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    new_state = AdamState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps_adam=state.eps_adam)
    return new_params, new_state


def adam_step(params: DisplacementField, grad: DisplacementField,
              state: AdamState) -> tuple[DisplacementField, AdamState]:
    """One bias-corrected Adam update of a displacement field."""
    if params.shape.dims != grad.shape.dims:
        raise ShapeError(f"adam_step: grid {params.shape.dims} vs {grad.shape.dims}")
    if state.m.shape != params.data.shape:
        raise ShapeError(f"adam_step: state shaped {state.m.shape}, params {params.data.shape}")
    new_p, new_state = _adam_update(params.data, grad.data, state)
    return DisplacementField(new_p), new_state


def _default_iters(levels: int) -> tuple[int, ...]:
    base = (300, 200, 100)
    if levels <= 3:
        return base[3 - levels:]
    return (300,) * (levels - 3) + base


def _default_windows(levels: int) -> tuple[int, ...]:
    if levels == 1:
        return (9,)
    return (5,) * (levels - 1) + (9,)


@dataclass(frozen=True)
class SolveConfig:
    """Solver schedule, loss weights, and toggles for one registration job.

    `iters_per_level` and `ncc_window_per_level` are ordered coarse to fine
    and default to (300, 200, 100) and (5, 5, 9) for the 3-level pyramid;
    passing None derives equivalents for other level counts.
    """

    pyramid_levels: int = 3
    iters_per_level: tuple[int, ...] | None = None
    stop_rel_tol: float = 1e-5
    lr: float = 0.05
    ncc_window_per_level: tuple[int, ...] | None = None
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    charbonnier: CharbonnierParams = dc_field(default_factory=CharbonnierParams)

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        iters = self.iters_per_level
        if iters is None:
            iters = _default_iters(self.pyramid_levels)
        else:
            iters = tuple(int(i) for i in iters)
        if len(iters) != self.pyramid_levels or any(i < 1 for i in iters):
            raise ConfigError(f"iters_per_level needs {self.pyramid_levels} positive entries, got {iters}")
        object.__setattr__(self, "iters_per_level", iters)
        wins = self.ncc_window_per_level
        if wins is None:
            wins = _default_windows(self.pyramid_levels)
        else:
            wins = tuple(int(w) for w in wins)
        if len(wins) != self.pyramid_levels or any(w < 1 or w % 2 == 0 for w in wins):
            raise ConfigError(f"ncc_window_per_level needs {self.pyramid_levels} odd entries, got {wins}")
        object.__setattr__(self, "ncc_window_per_level", wins)
        if not self.stop_rel_tol > 0:
            raise ConfigError(f"stop_rel_tol must be > 0, got {self.stop_rel_tol}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class TraceRow:
    """Objective summary of one solver iteration."""

    level: int
    iteration: int
    total: float
    sim: float
    smooth_f: float
    smooth_b: float
    cyc: float
    trans: float
    anatomy_cyc: float
    diff_cyc: float
    grad_f_norm: float
    grad_b_norm: float


@dataclass
class SolveTrace:
    """Per-iteration objective values plus wall time per pyramid level."""

    rows: list[TraceRow] = dc_field(default_factory=list)
    level_seconds: list[float] = dc_field(default_factory=list)

    def level_rows(self, level: int) -> list[TraceRow]:
        return [r for r in self.rows if r.level == level]


def _build_pyramid(l: ScalarVolume, u: ScalarVolume, ls_soft, levels: int):
    """Coarse-first list of (image, target, soft labels) per level."""
    chain = [(l, u, ls_soft)]
    for _ in range(levels - 1):
        lv, uv, sv = chain[-1]
        chain.append((downsample_box2(lv), downsample_box2(uv), downsample_box2(sv)))
    chain.reverse()
    return chain


def optimize_pair(l: ScalarVolume, ls: LabelVolume, u: ScalarVolume,
                  cfg: SolveConfig = SolveConfig()) -> tuple[DisplacementField, DisplacementField, SolveTrace]:
    """Jointly optimize the forward and backward fields for one atlas/target pair.

    Returns full-resolution (f_fwd, f_bwd) and the iteration trace. The solve
    is deterministic: identical inputs and config give bit-identical fields.
    """
    dims = l.shape.dims
    if ls.shape.dims != dims or u.shape.dims != dims:
        raise ShapeError(f"optimize_pair: grids {dims}, {ls.shape.dims}, {u.shape.dims} differ")
    if ls.num_classes < 2:
        raise ShapeError(f"optimize_pair needs at least 2 classes, got {ls.num_classes}")

    pyramid = _build_pyramid(l, u, one_hot_encode(ls), cfg.pyramid_levels)
    trace = SolveTrace()
    params = np.zeros((2,) + pyramid[0][0].shape.dims + (3,), dtype=np.float64)

    for li, (lv, uv, sv) in enumerate(pyramid):
        if li > 0:
            target = GridShape(*lv.shape.dims)
            f_fwd = upsample_field_2x(DisplacementField(params[0]), target)
            f_bwd = upsample_field_2x(DisplacementField(params[1]), target)
            params = np.stack([f_fwd.data, f_bwd.data])
        state = AdamState.fresh(params, lr=cfg.lr)
        window = cfg.ncc_window_per_level[li]
        totals: list[float] = []
        best_total = np.inf
        best_params = params
        best_window_mean = np.inf
        t0 = time.perf_counter()
        for it in range(cfg.iters_per_level[li]):
            try:
                res = _composite_eval(lv.data, uv.data, sv.data, params[0], params[1],
                                      cfg.weights, cfg.charbonnier, window)
            except NumericsError as e:
                raise NumericsError(f"{e} (level {li}, iteration {it})") from e
            gf, gb = res["grad_fF"], res["grad_fB"]
            trace.rows.append(TraceRow(
                level=li, iteration=it, total=res["total"], sim=res["sim"],
                smooth_f=res["smooth_f"], smooth_b=res["smooth_b"], cyc=res["cyc"],
                trans=res["trans"], anatomy_cyc=res["anatomy_cyc"], diff_cyc=res["diff_cyc"],
                grad_f_norm=float(np.sqrt(np.sum(gf * gf))),
                grad_b_norm=float(np.sqrt(np.sum(gb * gb))),
            ))
            totals.append(res["total"])
            if res["total"] < best_total:
                best_total = res["total"]
                best_params = params
            if it + 1 >= 2 * STOP_WINDOW:
                # windowed means smooth out Adam's oscillation; stop once they
                # stagnate, or once the level regresses past its best window
                # (a converged start that step noise can only damage)
                recent = sum(totals[-STOP_WINDOW:]) / STOP_WINDOW
                previous = sum(totals[-2 * STOP_WINDOW:-STOP_WINDOW]) / STOP_WINDOW
                best_window_mean = min(best_window_mean, previous)
                if abs(recent - previous) < cfg.stop_rel_tol * max(abs(previous), 1e-30):
                    break
                if recent - best_window_mean > 10 * cfg.stop_rel_tol * abs(best_window_mean):
                    break
            # warmup over the first window of each level: moment estimates settle
            # before full-size steps, so a near-optimal start is not kicked away
            scale = min(1.0, (it + 1) / STOP_WINDOW)
            params, state = _adam_update(params, np.stack([gf, gb]), state, scale)
        params = best_params  # the best visited point of this level
        trace.level_seconds.append(time.perf_counter() - t0)

    return DisplacementField(params[0]), DisplacementField(params[1]), trace
