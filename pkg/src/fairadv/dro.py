"""Exact solver for the worst-case class reweighting inside a KL ball.

Problem: given one loss value per class present in the batch, maximize
``sum_c w_c * loss_c`` over the probability simplex subject to a KL budget
tying w to the uniform anchor U over present classes. Two constraint
directions are supported:

- ``anchor_first``: KL(U, w) <= tau. KKT gives w_c proportional to
  1 / (mu - loss_c) with mu > max_c loss_c; KL(U, w(mu)) decreases
  monotonically in mu (to 0 as mu -> inf), so one bisection on mu lands on
  the active constraint. Every weight stays strictly positive because
  KL(U, w) blows up as any coordinate approaches 0.
- ``weights_first``: KL(w, U) <= tau. KKT gives a temperature softmax
  w_c proportional to exp(loss_c / lam); KL(w(lam), U) decreases in lam,
  bisect on lam. Here the divergence is capped at log(m/k) at the vertex
  (k = number of tied argmax classes), so a large enough tau makes the
  constraint inactive and the vertex itself optimal.

Degenerate cases resolve deterministically: tau = 0 or constant losses
return the uniform weights (the minimal-divergence optimum).

``brute_force_oracle`` is a grid search over explicit feasible points used
only by tests; it shares no machinery with the bisection solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ClassMargins

DIRECTIONS = ("anchor_first", "weights_first")

_BISECT_TOL = 1e-12
_BISECT_MAX_ITER = 200
# Default coarse grid steps for the oracle, by number of present classes.
_ORACLE_RESOLUTION = {2: 1e-6, 3: 1e-3, 4: 2.5e-3}


@dataclass
class DroWeights:
    """Solver output: simplex weights over present classes plus certificates."""
    classes: np.ndarray  # class ids the weights refer to
    weights: np.ndarray  # same length, sums to 1
    tau: float
    direction: str
    achieved_divergence: float
    objective_value: float

    def by_class(self, n_classes: int) -> np.ndarray:
        """(n_classes,) weight vector with nan marking absent classes."""
        full = np.full(n_classes, np.nan)
        full[self.classes] = self.weights
        return full


def kl_uniform_to(w: np.ndarray) -> float:
    """KL(U, w) for strictly positive w on the simplex."""
    m = w.shape[0]
    u = 1.0 / m
    return float(np.sum(u * np.log(u / w)))


def kl_to_uniform(w: np.ndarray) -> float:
    """KL(w, U) with the 0 * log 0 = 0 convention."""
    m = w.shape[0]
    pos = w > 0.0
    return float(np.sum(w[pos] * np.log(w[pos] * m)))


def _validate(losses: ClassMargins, tau: float, direction: str) -> np.ndarray:
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    ell = losses.present_values()
    if ell.size == 0:
        raise ValueError("no class is present in the batch")
    if not np.all(np.isfinite(ell)):
        raise ValueError("losses must be finite")
    return ell


def _result(losses: ClassMargins, w: np.ndarray, tau: float, direction: str) -> DroWeights:
    ell = losses.present_values()
    div = kl_uniform_to(w) if direction == "anchor_first" else kl_to_uniform(w)
    return DroWeights(
        classes=np.flatnonzero(losses.present),
        weights=w,
        tau=tau,
        direction=direction,
        achieved_divergence=div,
        objective_value=float(np.dot(w, ell)),
    )


def _anchor_weights(ell: np.ndarray, mu: float) -> np.ndarray:
    p = 1.0 / (mu - ell)
    return p / np.sum(p)


def _solve_anchor_first(ell: np.ndarray, tau: float) -> np.ndarray:
    top = float(np.max(ell))
    # Numerical guard: closest representable concentration point.
    lo = top + 1e-12
    if kl_uniform_to(_anchor_weights(ell, lo)) <= tau:
        return _anchor_weights(ell, lo)
    hi = top + 1.0
    while kl_uniform_to(_anchor_weights(ell, hi)) > tau:
        hi = top + 2.0 * (hi - top)
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        resid = kl_uniform_to(_anchor_weights(ell, mid)) - tau
        if abs(resid) <= _BISECT_TOL:
            hi = mid
            break
        if resid > 0.0:
            lo = mid
        else:
            hi = mid
    # hi side satisfies KL <= tau, keeping the output feasible.
    return _anchor_weights(ell, hi)


def _temperature_weights(ell: np.ndarray, lam: float) -> np.ndarray:
    e = np.exp((ell - np.max(ell)) / lam)
    return e / np.sum(e)


def _solve_weights_first(ell: np.ndarray, tau: float) -> np.ndarray:
    argmax_set = ell == np.max(ell)
    k = int(np.sum(argmax_set))
    vertex = argmax_set.astype(np.float64) / k
    if tau >= kl_to_uniform(vertex) - 1e-15:
        # Whole-budget case: the linear maximum over the simplex is feasible.
        return vertex
    hi = 1.0
    while kl_to_uniform(_temperature_weights(ell, hi)) > tau:
        hi *= 2.0
    lo = hi
    while kl_to_uniform(_temperature_weights(ell, lo)) <= tau:
        lo *= 0.5
        if lo < 1e-300:  # losses separated by less than float resolution
            return vertex
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        resid = kl_to_uniform(_temperature_weights(ell, mid)) - tau
        if abs(resid) <= _BISECT_TOL:
            hi = mid
            break
        if resid > 0.0:
            lo = mid
        else:
            hi = mid
    return _temperature_weights(ell, hi)


def solve_kl_dro(losses: ClassMargins, tau: float, direction: str = "anchor_first") -> DroWeights:
    """Maximizer of sum_c w_c * loss_c over the KL ball around uniform.

    Only classes present in ``losses`` participate; the anchor is uniform
    over those classes. Constant losses (or tau = 0) return uniform weights.
    """
    ell = _validate(losses, tau, direction)
    m = ell.shape[0]
    uniform = np.full(m, 1.0 / m)
    if tau == 0.0 or m == 1 or float(np.max(ell)) == float(np.min(ell)):
        return _result(losses, uniform, tau, direction)
    if direction == "anchor_first":
        w = _solve_anchor_first(ell, tau)
    else:
        w = _solve_weights_first(ell, tau)
    return _result(losses, w, tau, direction)


def expand_to_sample_weights(w: DroWeights, y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-sample weight w[y_i] * m, m = number of present classes.

    With uniform weights every sample gets exactly 1, so the weighted batch
    mean collapses to the plain mean.
    """
    full = w.by_class(n_classes)
    y = np.asarray(y, dtype=np.int64)
    out = full[y] * w.weights.shape[0]
    if np.any(np.isnan(out)):
        raise RuntimeError("batch contains a label whose class has no solved weight")
    return out


def _feasible_mask(grid: np.ndarray, tau: float, direction: str) -> np.ndarray:
    m = grid.shape[1]
    if direction == "anchor_first":
        with np.errstate(divide="ignore"):
            div = -np.log(m) - np.mean(np.log(grid), axis=1)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(grid > 0.0, grid * np.log(grid * m), 0.0)
        div = np.sum(terms, axis=1)
    return div <= tau + 1e-12


def _simplex_grid(m: int, step: float) -> np.ndarray:
    """All lattice points k/r on the m-simplex with r = round(1/step)."""
    r = int(round(1.0 / step))
    if m == 2:
        k = np.arange(r + 1)
        return np.stack([k, r - k], axis=1) / r
    if m == 3:
        k1, k2 = np.meshgrid(np.arange(r + 1), np.arange(r + 1), indexing="ij")
        k1, k2 = k1.ravel(), k2.ravel()
        keep = k1 + k2 <= r
        k1, k2 = k1[keep], k2[keep]
        return np.stack([k1, k2, r - k1 - k2], axis=1) / r
    chunks = []
    for a in range(r + 1):
        k2, k3 = np.meshgrid(np.arange(r + 1 - a), np.arange(r + 1 - a), indexing="ij")
        k2, k3 = k2.ravel(), k3.ravel()
        keep = k2 + k3 <= r - a
        k2, k3 = k2[keep], k3[keep]
        chunks.append(np.stack([np.full_like(k2, a), k2, k3, r - a - k2 - k3], axis=1))
    return np.concatenate(chunks, axis=0) / r


def _local_grid(center: np.ndarray, half_width: float, step: float) -> np.ndarray:
    """Simplex points whose first m-1 coordinates lie on a local lattice."""
    m = center.shape[0]
    offsets = np.arange(-half_width, half_width + 0.5 * step, step)
    axes = [np.clip(center[i] + offsets, 0.0, 1.0) for i in range(m - 1)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([a.ravel() for a in mesh], axis=1)
    last = 1.0 - np.sum(pts, axis=1)
    keep = last >= -1e-15
    pts, last = pts[keep], np.clip(last[keep], 0.0, 1.0)
    return np.concatenate([pts, last[:, None]], axis=1)


def _best_feasible(grid: np.ndarray, ell: np.ndarray, tau: float, direction: str):
    mask = _feasible_mask(grid, tau, direction)
    if not np.any(mask):
        return None, -np.inf
    feas = grid[mask]
    obj = feas @ ell
    i = int(np.argmax(obj))
    return feas[i], float(obj[i])


def brute_force_oracle(
    losses: ClassMargins,
    tau: float,
    direction: str = "anchor_first",
    grid_resolution: float | None = None,
) -> DroWeights:
    """Feasible-grid argmax of the class-weight objective; test-only reference.

    Scans the full simplex lattice at a coarse resolution, then refines the
    lattice twice in a shrinking window around the best point (the coarse
    step alone cannot reach the objective tolerances the tests demand). The
    uniform point is always included so a zero budget stays solvable.
    """
    ell = _validate(losses, tau, direction)
    m = ell.shape[0]
    if m > 4:
        raise ValueError("oracle only supports up to 4 present classes")
    if m == 1:
        return _result(losses, np.ones(1), tau, direction)
    step = grid_resolution if grid_resolution is not None else _ORACLE_RESOLUTION[m]
    uniform = np.full(m, 1.0 / m)

    best_w, best_obj = _best_feasible(_simplex_grid(m, step), ell, tau, direction)
    if best_w is None or float(np.dot(uniform, ell)) > best_obj:
        best_w, best_obj = uniform, float(np.dot(uniform, ell))
    for _ in range(2):
        half, step = 2.0 * step, step / 25.0
        w, obj = _best_feasible(_local_grid(best_w, half, step), ell, tau, direction)
        if w is not None and obj > best_obj:
            best_w, best_obj = w, obj
    return _result(losses, best_w, tau, direction)
