"""4D inverse solver over hidden fields.

The free variables are the hidden fields. Every instantaneous state is the
kernel-weighted mix of the hidden fields, its images are compared with the
data of its own epoch, and the gradient reaching hidden field ``t`` is the
kernel-weighted sum of the per-epoch gradients ``sum_t' w_t'(t) g_t'``.

The optimiser is a projected limited-memory BFGS with bound constraints and
an Armijo backtracking search along the projected path; plain projected
gradient descent is available as ``method="gradient"``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .forward import ImageSet, OpticsModel, Renderer, RenderWorkspace, parallel_map
from .geometry import ViewEpoch
from .grid import CarveMask, ExtinctionField, FieldSequence, GridMismatchError, VoxelGrid
from .metrics import per_state
from .temporal import INFINITE, TemporalKernel, format_sigma, kernel_build, parse_sigma

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Cost or gradient became non-finite."""


@dataclass
class ReconConfig:
    sigma: float = 20.0
    max_iters: int = 100
    init_value: float = 1.0
    lower_bound: float = 0.0
    upper_bound: float = 300.0
    memory: int = 10
    method: str = "lbfgsb"
    # largest voxel change of the very first (steepest-descent) trial step, km^-1
    first_step: float = 1.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    tol: float = 1e-6
    mask: CarveMask | None = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma = parse_sigma(self.sigma)
        if not 0 <= self.lower_bound < self.upper_bound:
            raise ValueError("bounds must satisfy 0 <= lower < upper")
        if not self.lower_bound <= self.init_value <= self.upper_bound:
            raise ValueError("init_value must lie within the bounds")
        if self.method not in ("lbfgsb", "gradient"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iters < 0 or self.memory < 1:
            raise ValueError("max_iters must be >= 0 and memory >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "mask"}
        d["sigma"] = format_sigma(self.sigma)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)} - {"mask"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recon config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReconState:
    hidden: FieldSequence
    states: FieldSequence
    cost_history: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""


def mix_rows(weights: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """``weights @ stack`` accumulated in a fixed order.

    Identical input rows and identical weight rows give bit-identical outputs,
    which keeps the uniform (static) kernel exactly uniform across iterations.
    """
    out = np.zeros((weights.shape[0], stack.shape[1]))
    for t in range(weights.shape[0]):
        acc = out[t]
        for tp in range(weights.shape[1]):
            acc += weights[t, tp] * stack[tp]
    return out


class ReconProblem:
    """Cost and hidden-field gradient for fixed data, geometry and kernel."""

    def __init__(self, renderer: Renderer, data: Sequence[ImageSet], kernel: TemporalKernel):
        if len(data) != len(renderer.epochs):
            raise ValueError(f"{len(data)} image sets for {len(renderer.epochs)} epochs")
        if kernel.n_state != len(data):
            raise ValueError("kernel has a different number of states than there are epochs")
        for e, (ep, d) in enumerate(zip(renderer.epochs, data)):
            if len(d.images) != len(ep.cameras):
                raise ValueError(f"epoch {e}: {len(d.images)} images for {len(ep.cameras)} cameras")
            for im, cam in zip(d.images, ep.cameras):
                if im.shape != (cam.rows, cam.cols):
                    raise ValueError(f"epoch {e}: image shape {im.shape} != camera {(cam.rows, cam.cols)}")
                if not np.all(np.isfinite(im)):
                    raise ValueError(f"epoch {e}: non-finite measurements")
        self.renderer = renderer
        self.data = list(data)
        self.kernel = kernel
        self.grid = renderer.grid

    @property
    def n_state(self) -> int:
        return self.kernel.n_state

    def states(self, hidden: np.ndarray) -> np.ndarray:
        return mix_rows(self.kernel.weights, hidden)

    def epoch_terms(self, hidden: np.ndarray):
        """Per-epoch costs and state-space gradients at the mixed states."""
        states = self.states(hidden)
        terms = parallel_map(lambda e: self.renderer.value_and_grad(e, states[e], self.data[e]),
                             range(self.n_state))
        costs = np.array([c for c, _ in terms])
        grads = np.stack([g for _, g in terms])
        return costs, grads

    def value_and_grad(self, hidden: np.ndarray) -> tuple[float, np.ndarray]:
        costs, grads = self.epoch_terms(hidden)
        value = float(sum(costs))
        return value, mix_rows(self.kernel.weights.T, grads)

    def value(self, hidden: np.ndarray) -> float:
        states = self.states(hidden)
        imgs = parallel_map(lambda e: self.renderer.render(e, states[e]), range(self.n_state))
        total = 0.0
        for im, d in zip(imgs, self.data):
            r = im.vector() - d.vector()
            total += 0.5 * float(r @ r)
        return total


def _hidden_stack(hidden: FieldSequence | np.ndarray, grid: VoxelGrid) -> np.ndarray:
    if isinstance(hidden, FieldSequence):
        if hidden.grid != grid:
            raise GridMismatchError("hidden fields are on a different grid")
        return hidden.stack()
    return np.asarray(hidden, dtype=float)


def cost(hidden: FieldSequence, data: Sequence[ImageSet], renderer: Renderer, kernel: TemporalKernel) -> float:
    """Sum over epochs of half the squared image residual of the mixed states."""
    problem = ReconProblem(renderer, data, kernel)
    return problem.value(_hidden_stack(hidden, renderer.grid))


def grad_hidden(hidden: FieldSequence, data: Sequence[ImageSet], renderer: Renderer,
                kernel: TemporalKernel, t: int) -> np.ndarray:
    """Gradient of the total cost with respect to hidden field ``t`` (grid-shaped)."""
    if tuple(kernel.times) != tuple(hidden.times):
        raise ValueError("kernel times differ from the hidden-field times")
    problem = ReconProblem(renderer, data, kernel)
    _, grads = problem.epoch_terms(_hidden_stack(hidden, renderer.grid))
    w = kernel.weights[:, t]
    g = np.zeros(renderer.grid.size)
    for tp in range(kernel.n_state):
        g += w[tp] * grads[tp]
    return g.reshape(renderer.grid.shape, order="F")


# -- optimiser ----------------------------------------------------------------------------

def _two_loop(g, s_list, y_list, free):
    q = g * free
    # pairs restricted to the free variables can lose their curvature; skip those
    pairs = []
    for s, y in zip(s_list, y_list):
        sf, yf = (s * free).ravel(), (y * free).ravel()
        sy = float(sf @ yf)
        if sy > 1e-12 * float(np.linalg.norm(sf) * np.linalg.norm(yf)):
            pairs.append((1.0 / sy, sf, yf))
    q = q.ravel()
    alphas = []
    for rho, sf, yf in reversed(pairs):
        a = rho * float(sf @ q)
        alphas.append(a)
        q = q - a * yf
    if pairs:
        _, sf, yf = pairs[-1]
        gamma = float(sf @ yf) / float(yf @ yf)
    else:
        gamma = 1.0
    r = gamma * q
    for (rho, sf, yf), a in zip(pairs, reversed(alphas)):
        b = rho * float(yf @ r)
        r = r + (a - b) * sf
    return -r.reshape(g.shape) * free


def _minimize(problem: ReconProblem, x0: np.ndarray, allowed: np.ndarray, cfg: ReconConfig, callback=None):
    lo, hi = cfg.lower_bound, cfg.upper_bound

    def project(x):
        return np.where(allowed, np.clip(x, lo, hi), 0.0)

    def evaluate(x):
        f, g = problem.value_and_grad(x)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite cost or gradient (cost={f})")
        return f, g

    x = project(x0)
    f, g = evaluate(x)
    history, gnorms = [f], []
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    alpha_gd = None
    reason = "max_iters"
    it = 0

    def free_set(x, g):
        blocked = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
        return (allowed & ~blocked).astype(float)

    free = free_set(x, g)
    gnorms.append(float(np.linalg.norm(g * free)))
    if callback:
        callback(0, x, f, gnorms[-1])
    for it in range(1, cfg.max_iters + 1):
        if gnorms[-1] == 0.0 or f == 0.0:
            reason = "stationary"
            it -= 1
            break
        if cfg.method == "lbfgsb":
            d = _two_loop(g, s_list, y_list, free)
            if float(d.ravel() @ g.ravel()) >= 0:
                s_list.clear()
                y_list.clear()
                d = -g * free
            if s_list:
                alpha = 1.0
            else:
                alpha = cfg.first_step / max(float(np.abs(d).max()), 1e-300)
        else:
            d = -g * free
            alpha = alpha_gd if alpha_gd is not None else cfg.first_step / max(float(np.abs(d).max()), 1e-300)

        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = project(x + alpha * d)
            dx = x_new - x
            decrease = min(float(g.ravel() @ dx.ravel()), 0.0)
            if not np.any(dx):
                break
            f_new = problem.value(x_new)
            if math.isfinite(f_new) and f_new <= f + cfg.armijo * decrease:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            if cfg.method == "lbfgsb" and s_list:
                s_list.clear()
                y_list.clear()
                continue
            reason = "line_search"
            it -= 1
            break
        f_new, g_new = evaluate(x_new)
        s, y = x_new - x, g_new - g
        sy = float(s.ravel() @ y.ravel())
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > cfg.memory:
                s_list.pop(0)
                y_list.pop(0)
        if cfg.method == "gradient":
            alpha_gd = alpha * 2.0
        rel = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        free = free_set(x, g)
        history.append(f)
        gnorms.append(float(np.linalg.norm(g * free)))
        if callback:
            callback(it, x, f, gnorms[-1])
        if rel < cfg.tol:
            reason = "converged"
            break
    return x, history, gnorms, it, reason


class IterationLog:
    """CSV log of cost, gradient norm and (optionally) errors against ground truth."""

    def __init__(self, path, problem: ReconProblem, truth: FieldSequence | None = None):
        self.problem = problem
        self.truth = truth
        self.rows: list[list] = []
        self.path = path
        n = problem.n_state
        self.header = ["iter", "cost", "grad_norm"]
        if truth is not None:
            self.header += ["epsilon", "delta"] + [f"epsilon_t{i}" for i in range(n)] + [f"delta_t{i}" for i in range(n)]

    def __call__(self, it, x, f, gnorm):
        row = [it, repr(f), repr(gnorm)]
        if self.truth is not None:
            est = FieldSequence.from_stack(self.problem.grid, self.truth.times, self.problem.states(x))
            deltas, eps = per_state(self.truth, est)
            row += [repr(float(np.mean(eps))), repr(float(np.mean(deltas)))]
            row += [repr(e) for e in eps] + [repr(d) for d in deltas]
        self.rows.append(row)

    def write(self, path=None):
        from .io import atomic_write_text
        lines = [",".join(self.header)] + [",".join(str(v) for v in r) for r in self.rows]
        atomic_write_text(path or self.path, "\n".join(lines) + "\n")


def reconstruct_4d(data: Sequence[ImageSet], epochs: Sequence[ViewEpoch], config: ReconConfig,
                   optics: OpticsModel, gain: float = 1.0, *, grid: VoxelGrid,
                   truth: FieldSequence | None = None, log_path=None,
                   workspace: RenderWorkspace = RenderWorkspace(),
                   renderer: Renderer | None = None) -> tuple[FieldSequence, ReconState]:
    """Recover one extinction state per epoch."""
    if not epochs:
        raise ValueError("no epochs to reconstruct")
    if len(data) != len(epochs):
        raise ValueError(f"{len(data)} image sets for {len(epochs)} epochs")
    times = [ep.time for ep in epochs]
    kernel = kernel_build(times, config.sigma)
    if renderer is None:
        renderer = Renderer(grid, epochs, optics, gain, workspace)
    problem = ReconProblem(renderer, data, kernel)
    n = kernel.n_state
    if config.mask is not None:
        if config.mask.grid != grid:
            raise GridMismatchError("mask grid differs from the reconstruction grid")
        allowed_row = config.mask.flat()
    else:
        allowed_row = np.ones(grid.size, dtype=bool)
    allowed = np.broadcast_to(allowed_row, (n, grid.size))
    x0 = np.where(allowed, config.init_value, 0.0)
    logger = IterationLog(log_path, problem, truth) if (log_path or truth is not None) else None
    x, history, gnorms, iters, reason = _minimize(problem, x0, allowed, config, logger)
    if logger is not None and log_path:
        logger.write()
    log.info("reconstruction stopped after %d iterations (%s), cost %.6g", iters, reason, history[-1])
    hidden = FieldSequence.from_stack(grid, times, x)
    states = FieldSequence.from_stack(grid, times, np.clip(problem.states(x), 0.0, None))
    return states, ReconState(hidden, states, history, gnorms, iters, reason)


def reconstruct_static(data: Sequence[ImageSet], epochs: Sequence[ViewEpoch], config: ReconConfig,
                       optics: OpticsModel, gain: float = 1.0, **kw) -> ExtinctionField:
    """Static tomography: uniform weights, returns the common state at the middle epoch."""
    cfg = ReconConfig(**{**config.to_dict(), "sigma": INFINITE})
    cfg.mask = config.mask
    states, _ = reconstruct_4d(data, epochs, cfg, optics, gain, **kw)
    return states.states[(len(states) - 1) // 2]
