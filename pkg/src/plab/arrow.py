"""Geometry-aware optimizer with an online windowed gradient-covariance preconditioner.

Update rule for a managed parameter group with flattened gradient g_t:

    delta = -eta * (alpha_t I + beta C_t)^{-1} g_t,
    C_t   = (1/k) sum of the k buffered gradients' outer products.

The inverse is never materialized: with U = sqrt(beta/k) * G (G the d x k
buffer matrix),

    (alpha I + U U^T)^{-1} g
        = g/alpha - U (I + U^T U / alpha)^{-1} (U^T g) / alpha^2,

so a step costs O(d k + k^3) and only d x k / k x k arrays ever exist.
Along an eigenvector of C_t with eigenvalue lambda the update is scaled by
1/(alpha + beta * lambda): frequently-visited gradient directions are
suppressed, unexplored ones relatively amplified.

Until a group's window holds ``window`` gradients, steps fall back to a
warm-up rule (plain SGD or an RMS-style normalized step). The damping
alpha may decay exponentially per step or per task.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError, NotPositiveDefiniteError, NumericError
from .linalg import solve_spd
from .model import ParamGroup

WARMUP_MODES = ("sgd", "rms_like")
DECAY_MODES = ("none", "exp_global", "exp_per_task")


@dataclass(frozen=True)
class ArrowConfig:
    alpha: float = 1e-3
    beta: float = 0.9
    window: int = 20
    eta: float = 1e-3
    warmup: str = "rms_like"
    alpha_decay: str = "none"
    decay_rate: float = 1.0
    scope: str = "all"
    include_current: bool = False
    reset_window_per_task: bool = False
    rms_rho: float = 0.999
    rms_eps: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.warmup not in WARMUP_MODES:
            raise ConfigError(f"warmup must be one of {WARMUP_MODES}, got {self.warmup!r}")
        if self.alpha_decay not in DECAY_MODES:
            raise ConfigError(f"alpha_decay must be one of {DECAY_MODES}, got {self.alpha_decay!r}")
        if self.alpha_decay != "none" and not 0.0 < self.decay_rate <= 1.0:
            raise ConfigError(f"decay rate must be in (0, 1], got {self.decay_rate}")


class GradientWindow:
    """Ring buffer of the last W flattened gradients of one parameter group."""

    def __init__(self, dim: int, capacity: int):
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.buf = np.zeros((self.capacity, self.dim), dtype=np.float64)
        self.fill = 0
        self.cursor = 0

    def push(self, g: np.ndarray) -> None:
        if g.shape != (self.dim,):
            raise ContractError(f"gradient shape {g.shape} != window dim ({self.dim},)")
        self.buf[self.cursor] = g
        self.cursor = (self.cursor + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def matrix(self) -> np.ndarray:
        """Buffered gradients as a d x k matrix (column order irrelevant for C)."""
        return self.buf[: self.fill].T

    def reset(self) -> None:
        self.fill = 0
        self.cursor = 0
        self.buf[:] = 0.0


def woodbury_apply(window: GradientWindow, alpha: float, beta: float, g: np.ndarray) -> np.ndarray:
    """(alpha I + beta C)^{-1} g via the low-rank identity; never forms d x d."""
    if window.fill < 1:
        raise ContractError("window must hold at least one gradient")
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (window.dim,):
        raise ContractError(f"gradient shape {g.shape} != window dim ({window.dim},)")
    k = window.fill
    u = np.sqrt(beta / k) * window.matrix()  # d x k
    utg = u.T @ g
    inner = np.eye(k) + (u.T @ u) / alpha
    try:
        z = solve_spd(inner, utg)
    except NotPositiveDefiniteError as exc:
        raise NumericError(f"inner {k}x{k} system lost positive definiteness: {exc}") from exc
    return g / alpha - (u @ z) / (alpha * alpha)


def eigen_rescale_check(window: GradientWindow, alpha: float, beta: float):
    """Per-eigenvector scales actually applied by the preconditioner.

    Diagonalizes C through the SVD of G/sqrt(k) and measures the factor
    woodbury_apply puts on each eigenvector; returns (lambda_i, scale_i)
    pairs for the nonzero spectrum. The measured output must be collinear
    with the eigenvector, otherwise the state is numerically corrupt.
    """
    if window.fill < 1:
        raise ContractError("window must hold at least one gradient")
    k = window.fill
    u_mat, s, _ = np.linalg.svd(window.matrix() / np.sqrt(k), full_matrices=False)
    out = []
    for i in range(len(s)):
        if s[i] <= 0:
            continue
        lam = float(s[i] * s[i])
        vec = u_mat[:, i]
        y = woodbury_apply(window, alpha, beta, vec)
        measured = float(y @ vec)
        resid = np.linalg.norm(y - measured * vec)
        if resid > 1e-8 * max(1.0, abs(measured)):
            raise NumericError(f"eigenvector {i} not preserved (residual {resid:.3e})")
        out.append((lam, measured))
    return out


@dataclass
class RmsState:
    v: np.ndarray
    rho: float
    eps: float


class ArrowState:
    """Per-group optimizer state: gradient window, warm-up EMA, decay counters."""

    def __init__(self, dim: int, config: ArrowConfig):
        self.window = GradientWindow(dim, config.window)
        self.rms = RmsState(np.zeros(dim), config.rms_rho, config.rms_eps)
        self.global_step = 0
        self.task_index = 0

    def alpha_t(self, config: ArrowConfig) -> float:
        if config.alpha_decay == "exp_global":
            return config.alpha * config.decay_rate**self.global_step
        if config.alpha_decay == "exp_per_task":
            return config.alpha * config.decay_rate**self.task_index
        return config.alpha


def warmup_step(g: np.ndarray, state: ArrowState, config: ArrowConfig) -> np.ndarray:
    """Update rule used while the window is not yet full."""
    if config.warmup == "sgd":
        return -config.eta * g
    rms = state.rms
    rms.v = rms.rho * rms.v + (1.0 - rms.rho) * g * g
    return -config.eta * g / (np.sqrt(rms.v) + rms.eps)


def arrow_step(g: np.ndarray, state: ArrowState, config: ArrowConfig) -> np.ndarray:
    """One optimizer step for a flattened group gradient; returns the delta.

    Non-finite gradients abort the step with the state untouched. The
    incoming gradient preconditions against the previously buffered window
    and is pushed afterwards (push-first behind ``include_current``).
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericError("gradient contains non-finite values; step aborted")
    if config.include_current:
        state.window.push(g)
    alpha = state.alpha_t(config)
    if state.window.fill < config.window:
        delta = warmup_step(g, state, config)
    elif config.beta == 0.0:
        # Degenerate preconditioner: literally the SGD delta divided by alpha,
        # so the equivalence with the warm-up path is bitwise.
        delta = (-config.eta * g) / alpha
    else:
        delta = -config.eta * woodbury_apply(state.window, alpha, config.beta, g)
    if not config.include_current:
        state.window.push(g)
    state.global_step += 1
    return delta


_LAST_N_ATTN = re.compile(r"^last(\d+)_attn$")


def scope_filter(groups: list[ParamGroup], scope: str) -> tuple[list[ParamGroup], list[ParamGroup]]:
    """Partition groups into (managed, base-managed) per the scope selector.

    Selectors: ``all``; ``last_block_attn`` (attention of the final block);
    ``last<N>_attn`` (attention of the last N blocks).
    """
    if scope == "all":
        return list(groups), []
    m = _LAST_N_ATTN.match("last1_attn" if scope == "last_block_attn" else scope)
    if not m:
        raise ConfigError(f"unknown scope selector {scope!r}")
    n = int(m.group(1))
    block_ids = [g.block_index for g in groups if g.block_index is not None]
    if not block_ids:
        raise ConfigError(f"scope {scope!r} matched zero groups (model has no blocks)")
    cutoff = max(block_ids) + 1 - n
    managed = [g for g in groups
               if "attn" in g.scope_tags and g.block_index is not None and g.block_index >= cutoff]
    if not managed:
        raise ConfigError(f"scope {scope!r} matched zero groups")
    managed_names = {g.name for g in managed}
    return managed, [g for g in groups if g.name not in managed_names]


class ArrowOptimizer:
    """Applies the windowed-covariance update to scoped groups, SGD to the rest."""

    def __init__(self, groups: list[ParamGroup], config: ArrowConfig):
        self.config = config
        managed, _ = scope_filter(groups, config.scope)
        self.managed_names = {g.name for g in managed}
        self.states: dict[str, ArrowState] = {
            g.name: ArrowState(g.tensor.data.size, config) for g in managed
        }

    def on_task_start(self, task_index: int) -> None:
        for state in self.states.values():
            state.task_index = task_index
            if self.config.reset_window_per_task:
                state.window.reset()

    def step(self, group: ParamGroup, grad: np.ndarray) -> np.ndarray:
        """Parameter delta for one group; shape matches the parameter."""
        if group.name in self.states:
            flat = arrow_step(grad.ravel(), self.states[group.name], self.config)
            return flat.reshape(grad.shape)
        return -self.config.eta * grad

    def state_obj(self) -> dict:
        cfg = self.config
        out = {"config": {f.name: getattr(cfg, f.name) for f in fields(cfg)}, "groups": {}}
        for name, st in sorted(self.states.items()):
            out["groups"][name] = {
                "buffer": st.window.buf[: st.window.fill].tolist(),
                "fill": st.window.fill,
                "cursor": st.window.cursor,
                "rms_v": st.rms.v.tolist(),
                "alpha_t": st.alpha_t(cfg),
                "global_step": st.global_step,
                "task_index": st.task_index,
            }
        return out

    def save_state(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.state_obj(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        os.replace(tmp, path)

    def load_state(self, path: str) -> None:
        with open(path) as fh:
            obj = json.load(fh)
        for name, entry in obj["groups"].items():
            if name not in self.states:
                raise ConfigError(f"state for unknown group {name!r}")
            st = self.states[name]
            st.window.reset()
            for row in entry["buffer"]:
                st.window.push(np.asarray(row, dtype=np.float64))
            st.window.cursor = int(entry["cursor"])
            st.rms.v = np.asarray(entry["rms_v"], dtype=np.float64)
            st.global_step = int(entry["global_step"])
            st.task_index = int(entry["task_index"])


class SgdOptimizer:
    """Plain SGD; the baseline and the unscoped-group rule."""

    def __init__(self, eta: float):
        self.eta = float(eta)

    def on_task_start(self, task_index: int) -> None:
        pass

    def step(self, group: ParamGroup, grad: np.ndarray) -> np.ndarray:
        return -self.eta * grad

    def state_obj(self) -> dict:
        return {"eta": self.eta}

    def save_state(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.state_obj(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        os.replace(tmp, path)
