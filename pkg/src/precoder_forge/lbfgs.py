"""L-BFGS maximization of spectral efficiency from random starts."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import check_channel
from .errors import ParameterError
from .rng import complex_normal, derive_seed, make_rng
from .se import _projected_se_and_gradient, project_power, spectral_efficiency


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 500
    grad_tol: float = 1e-6
    max_linesearch: int = 30
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    init_scale: float | None = None  # None: sqrt(p / (n q))

    def __post_init__(self):
        if self.memory < 1 or self.max_iters < 1 or self.max_linesearch < 1:
            raise ParameterError("memory, max_iters and max_linesearch must be >= 1")
        if not self.grad_tol > 0:
            raise ParameterError("grad_tol must be > 0")
        if not 0 < self.armijo_c1 < 1 or not 0 < self.backtrack < 1:
            raise ParameterError("armijo_c1 and backtrack must lie in (0, 1)")


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    message: str = ""


def two_loop(grad, s_hist, y_hist, rho_hist):
    """Apply the L-BFGS inverse-Hessian approximation to ``grad``."""
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if s_hist:
        q *= np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
    for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def lbfgs_minimize(fun_and_grad, x0, opt=LbfgsConfig(), callback=None):
    """Minimize a smooth function of a real vector.

    Two-loop recursion with Armijo backtracking.  Curvature pairs with
    ``s.y <= 0`` are dropped.  If the search direction is not a descent
    direction the memory is cleared and steepest descent is used.  A failed
    line search ends the run with ``converged=False`` and the best iterate.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_and_grad(x)
    history = [f]
    s_hist, y_hist, rho_hist = [], [], []
    gnorm = float(np.linalg.norm(g))
    it = 0
    message = "max_iters reached"
    converged = False
    while True:
        if gnorm <= opt.grad_tol:
            converged, message = True, "gradient tolerance reached"
            break
        if it >= opt.max_iters:
            break
        d = -two_loop(g, s_hist, y_hist, rho_hist)
        slope = float(np.dot(g, d))
        if not slope < 0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = -gnorm ** 2
        # first step: unit-length move along the steepest descent direction
        step = 1.0 if s_hist else min(1.0, 1.0 / gnorm)
        for _ in range(opt.max_linesearch):
            x_new = x + step * d
            f_new, g_new = fun_and_grad(x_new)
            if f_new <= f + opt.armijo_c1 * step * slope:
                break
            step *= opt.backtrack
        else:
            message = "line search failed"
            break
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 0:
            s_hist.append(s); y_hist.append(y); rho_hist.append(1.0 / sy)
            if len(s_hist) > opt.memory:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
        history.append(f)
        if callback is not None:
            callback(x, f)
    return MinimizeResult(x, f, gnorm, it, converged, history, message)


@dataclass
class OptimizeResult:
    precoder: np.ndarray
    se: float
    iterations: int
    converged: bool
    wall_time: float
    se_history: list = field(default_factory=list)
    seed: int = 0
    unconstrained: np.ndarray | None = None


def initial_precoder(n, q, cfg, opt, seed):
    scale = opt.init_scale if opt.init_scale is not None else np.sqrt(cfg.power_budget / (n * q))
    V = complex_normal(make_rng(seed, "init"), (n, q)) * scale
    return project_power(V, cfg)


def optimize(H, cfg, opt=LbfgsConfig(), seed=0):
    """Maximize SE over ``V`` with the objective ``f(project_power(V))``."""
    t0 = time.perf_counter()
    H = check_channel(H)
    q, n = H.shape
    V0 = initial_precoder(n, q, cfg, opt, seed)

    def neg(x):
        V = x.view(np.complex128).reshape(n, q)
        val, grad = _projected_se_and_gradient(H, V, cfg.noise_power, cfg.power_budget)
        return -val, -np.ascontiguousarray(grad).ravel().view(np.float64)

    res = lbfgs_minimize(neg, np.ascontiguousarray(V0).ravel().view(np.float64), opt)
    V = res.x.view(np.complex128).reshape(n, q)
    W = project_power(V, cfg)
    se = spectral_efficiency(H, W, cfg)
    return OptimizeResult(
        precoder=W,
        se=se,
        iterations=res.iterations,
        converged=res.converged,
        wall_time=time.perf_counter() - t0,
        se_history=[-v for v in res.history],
        seed=seed,
        unconstrained=V.copy(),
    )


def default_threads():
    return max(1, int(os.environ.get("PRECODER_FORGE_THREADS", "1")))


def multi_start(H, cfg, opt=LbfgsConfig(), num_starts=1, seed=0, threads=None, offset=0):
    """Run ``num_starts`` independent optimizations; results in start order.

    Start ``j`` uses the derived seed ``derive_seed(seed, "start", offset + j)``.
    """
    if num_starts < 1:
        raise ParameterError(f"num_starts must be >= 1, got {num_starts}")
    seeds = [derive_seed(seed, "start", offset + j) for j in range(num_starts)]
    threads = threads or default_threads()
    if threads == 1:
        return [optimize(H, cfg, opt, s) for s in seeds]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda s: optimize(H, cfg, opt, s), seeds))
