"""Continuous simulated annealing over real dof vectors.

The minimizer is the thermalized downhill simplex: at temperature T every
stored vertex value is raised by a positive logarithmically distributed
random amount proportional to T, and every trial point is lowered the same
way, so uphill moves are accepted with Metropolis-like probability and the
T -> 0 limit is the plain Nelder-Mead simplex. Cooling is geometric; each
restart rebuilds the simplex around the best point found so far, and a
final zero-temperature polish grinds the local minimum.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng


@dataclass
class AnnealConfig:
    t0: float | None = None          # None: t0_factor * objective(x0)
    t0_factor: float = 1.0           # relative initial temperature
    alpha: float = 0.9               # cooling ratio, 0 < alpha < 1
    iters_per_temp: int = 200
    t_min_factor: float = 1e-8       # T_min = t_min_factor * T0
    restarts: int = 3
    step_scale: float = 0.5          # initial simplex edge per dof
    seed: int = 0
    ftol: float = 1e-12              # per-stage simplex convergence
    polish_iters: int | None = None  # None: iters_per_temp, at T = 0
    polish_rounds: int = 4           # shrinking-step simplex restarts

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.t_min_factor <= 0:
            raise ValueError("t_min_factor must be positive")


@dataclass
class AnnealResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)  # (temperature, best f) rows
    n_evals: int = 0
    aborted: bool = False  # non-finite objective encountered


class _Amebsa:
    """One simplex annealing run; tracks the true best point seen."""

    def __init__(self, objective, rng):
        self.objective = objective
        self.rng = rng
        self.n_evals = 0
        self.best_x = None
        self.best_f = np.inf
        self.aborted = False

    def _eval(self, x):
        f = float(self.objective(x))
        self.n_evals += 1
        if not np.isfinite(f):
            self.aborted = True
            return np.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = x.copy()
        return f

    def init_simplex(self, x0, step_scale):
        n = x0.size
        p = np.tile(x0, (n + 1, 1))
        for i in range(n):
            p[i + 1, i] += step_scale
        y = np.array([self._eval(v) for v in p])
        self.p, self.y = p, y

    def _thermal(self, size, temp):
        if temp <= 0.0:
            return np.zeros(size)
        return -temp * np.log(self.rng.random(size))

    def _try_move(self, ihi, yflu_hi, fac, temp):
        """Reflect/expand/contract the worst vertex through the centroid."""
        p, y = self.p, self.y
        n = p.shape[1]
        centroid = (p.sum(axis=0) - p[ihi]) / n
        ptry = centroid + fac * (p[ihi] - centroid)
        ytry = self._eval(ptry)
        yflu_try = ytry - self._thermal(1, temp)[0]
        if yflu_try < yflu_hi:
            p[ihi] = ptry
            y[ihi] = ytry
            return yflu_try, True
        return yflu_try, False

    def stage(self, temp, iters, ftol):
        """Run `iters` simplex moves at fixed temperature."""
        for _ in range(iters):
            if self.aborted:
                return
            yflu = self.y + self._thermal(self.y.size, temp)
            order = np.argsort(yflu)
            ilo, ihi = order[0], order[-1]
            inhi = order[-2]
            rtol = 2.0 * abs(yflu[ihi] - yflu[ilo]) / (
                abs(yflu[ihi]) + abs(yflu[ilo]) + 1e-300)
            if rtol < ftol:
                return
            yflu_try, moved = self._try_move(ihi, yflu[ihi], -1.0, temp)
            if moved and yflu_try <= yflu[ilo]:
                self._try_move(ihi, yflu_try, 2.0, temp)
            elif yflu_try >= yflu[inhi]:
                ysave = min(yflu_try, yflu[ihi])
                yflu_c, _ = self._try_move(ihi, ysave, 0.5, temp)
                if yflu_c >= ysave:
                    # shrink everything toward the (fluctuated) best vertex
                    keep = self.p[ilo].copy()
                    for i in range(self.p.shape[0]):
                        if i == ilo:
                            continue
                        self.p[i] = 0.5 * (self.p[i] + keep)
                        self.y[i] = self._eval(self.p[i])


def minimize(objective, x0, config=None):
    """Minimize a scalar objective over a real dof vector.

    Deterministic for a fixed config (counter-based RNG keyed by the seed).
    Returns an AnnealResult; the trace holds one (temperature, best f) row
    per cooling stage. A non-finite objective value aborts the run and the
    best point found so far is returned with `aborted` set.
    """
    cfg = config or AnnealConfig()
    x0 = np.asarray(x0, dtype=float)
    rng = make_rng(cfg.seed)
    runner = _Amebsa(objective, rng)
    f0 = runner._eval(x0)
    if runner.aborted:
        return AnnealResult(x0, f0, [], runner.n_evals, aborted=True)
    t0 = cfg.t0 if cfg.t0 is not None else cfg.t0_factor * max(abs(f0), 1e-12)
    t_min = cfg.t_min_factor * t0
    trace = []
    polish = cfg.polish_iters if cfg.polish_iters is not None else cfg.iters_per_temp
    for restart in range(cfg.restarts + 1):
        start = runner.best_x if runner.best_x is not None else x0
        runner.init_simplex(start.copy(), cfg.step_scale)
        temp = t0
        while temp > t_min and not runner.aborted:
            runner.stage(temp, cfg.iters_per_temp, cfg.ftol)
            trace.append((temp, runner.best_f))
            temp *= cfg.alpha
        if runner.aborted:
            break
    if not runner.aborted and polish > 0:
        step = 0.5 * cfg.step_scale
        for _ in range(max(cfg.polish_rounds, 1)):
            runner.init_simplex(runner.best_x.copy(), step)
            runner.stage(0.0, polish, 0.0)
            trace.append((0.0, runner.best_f))
            step *= 0.5
    return AnnealResult(runner.best_x, runner.best_f, trace, runner.n_evals,
                        aborted=runner.aborted)


def write_trace_csv(result, path):
    """Export the cooling trace (temperature, best objective) as CSV."""
    with open(path, "w") as fh:
        fh.write("temperature,best_objective\n")
        for temp, best in result.trace:
            fh.write(f"{float(temp)!r},{float(best)!r}\n")
