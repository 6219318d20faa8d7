"""Closed-form saliency math for removing one weight from a quadratic
loss model, extended with the first-order (gradient) term.

Everything here is a small-scale numerical oracle, not a production path:
dense float64 inverses, dimension capped at 512. The exact solution of

    min_dw  g.dw + 1/2 dw.H.dw   subject to   dw[m] + w[m] = 0

is computed alongside its first-order truncation and the
diagonal-Hessian shortcut, so each simplification step of the pruning
metric can be certified against direct substitution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DIM = 512
_COND_LIMIT = 1e13

# test hook: scales the quadratic gradient term of the exact saliency so the
# verification suite can prove it detects a corrupted closed form
MUTATION_HOOKS = {"third_term_scale": 1.0}


class SingularHessianError(ValueError):
    """Hessian (or kept submatrix) is numerically singular.

    ``condition`` carries the estimated condition number; callers may add
    damping (see ``default_damping``) and retry.
    """

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


def default_damping(hessian: np.ndarray) -> float:
    """Fallback ridge term: 1e-8 * mean diagonal magnitude."""
    n = hessian.shape[0]
    return 1e-8 * float(np.trace(hessian)) / n


def _checked_inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    cond = float(np.linalg.cond(matrix))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularHessianError(f"{what} is singular or ill-conditioned", cond)
    return np.linalg.inv(matrix)


@dataclass
class QuadModel:
    """Quadratic loss model around the current weights.

    w: weight vector; g: loss gradient at w; hessian: symmetric PSD
    curvature; damping: ridge added to the curvature before inversion.
    """

    w: np.ndarray
    g: np.ndarray
    hessian: np.ndarray
    damping: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        n = self.w.size
        if n < 1 or n > MAX_DIM:
            raise ValueError(f"model dimension {n} outside [1, {MAX_DIM}]")
        if self.g.shape != (n,) or self.hessian.shape != (n, n):
            raise ValueError("w, g, hessian shapes disagree")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        scale = max(1.0, float(np.abs(self.hessian).max()))
        if float(np.abs(self.hessian - self.hessian.T).max()) > 1e-12 * scale:
            raise ValueError("hessian is not symmetric")
        self.hessian = 0.5 * (self.hessian + self.hessian.T)

    @property
    def n(self) -> int:
        return self.w.size

    def effective_hessian(self) -> np.ndarray:
        if self.damping == 0.0:
            return self.hessian
        return self.hessian + self.damping * np.eye(self.n)

    def objective(self, delta_w: np.ndarray) -> float:
        """Loss change for a given weight perturbation."""
        h = self.effective_hessian()
        return float(self.g @ delta_w + 0.5 * delta_w @ h @ delta_w)


@dataclass
class ObsSolution:
    """Optimal removal of weight m: the compensating update, its Lagrange
    multiplier, and the resulting loss increase."""

    m: int
    delta_w: np.ndarray
    lagrange_lambda: float
    delta_e: float


def hessian_from_acts(x_rows, damping: float = 0.0, factor_two: bool = True) -> np.ndarray:
    """Layer curvature from calibration activations.

    factor_two=True gives the second derivative of the squared
    reconstruction error (2 X^T X); False gives the plain Gram matrix
    convention (X^T X). Both orderings rank weights identically.
    """
    x = np.asarray(x_rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need at least one activation row")
    h = x.T @ x
    if factor_two:
        h = 2.0 * h
    if damping:
        h = h + damping * np.eye(h.shape[0])
    return h


def obs_delta_e_full(model: QuadModel, m: int) -> ObsSolution:
    """Exact constrained minimum for removing weight m.

    Solves the Lagrangian system: lambda = (w_m - e_m.Hinv.g) / Hinv_mm,
    dw = -Hinv (lambda e_m + g); the loss increase keeps all four terms,
    including the gradient-squared ones the truncated form drops.
    """
    if not 0 <= m < model.n:
        raise ValueError(f"index {m} out of range for dimension {model.n}")
    h_inv = _checked_inverse(model.effective_hessian(), "hessian")
    h_inv_mm = h_inv[m, m]
    hinv_g = h_inv @ model.g
    w_m = model.w[m]

    lam = (w_m - hinv_g[m]) / h_inv_mm
    delta_w = -(lam * h_inv[:, m] + hinv_g)

    delta_e = (
        w_m * w_m / (2.0 * h_inv_mm)
        - w_m * hinv_g[m] / h_inv_mm
        + MUTATION_HOOKS["third_term_scale"] * hinv_g[m] ** 2 / (2.0 * h_inv_mm)
        - 0.5 * float(model.g @ hinv_g)
    )
    return ObsSolution(m=m, delta_w=delta_w, lagrange_lambda=float(lam), delta_e=float(delta_e))


def obs_delta_e_first_order(model: QuadModel, m: int) -> float:
    """Loss increase with the gradient-squared terms dropped."""
    if not 0 <= m < model.n:
        raise ValueError(f"index {m} out of range for dimension {model.n}")
    h_inv = _checked_inverse(model.effective_hessian(), "hessian")
    h_inv_mm = h_inv[m, m]
    w_m = model.w[m]
    return float(w_m * w_m / (2.0 * h_inv_mm) - w_m * (model.g @ h_inv[:, m]) / h_inv_mm)


def obs_delta_e_diag(w_m: float, x_norm_m: float, g_m: float) -> float:
    """Diagonal-curvature shortcut: (w * ||x||)^2 - w * g."""
    return (w_m * x_norm_m) ** 2 - w_m * g_m


def sparsegpt_metric(weights, hessian) -> np.ndarray:
    """Second-order importance |W|^2 / diag(H^-1), column-broadcast."""
    w = np.asarray(weights, dtype=np.float64)
    h_inv = _checked_inverse(np.asarray(hessian, dtype=np.float64), "hessian")
    return (w * w) / np.diag(h_inv)[np.newaxis, :]


def obs_weight_update(w_row, mask_row, hessian) -> np.ndarray:
    """Re-solve the kept weights after masking one output row.

    Minimizes the activation-space reconstruction error of the masked row
    against the dense row, i.e. (w' - w)^T H (w' - w) with the pruned
    coordinates pinned to zero, via the kept-submatrix normal equations.
    """
    w = np.asarray(w_row, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask_row, dtype=bool).reshape(-1)
    h = np.asarray(hessian, dtype=np.float64)
    if mask.shape != w.shape or h.shape != (w.size, w.size):
        raise ValueError("w_row, mask_row, hessian shapes disagree")
    kept = ~mask
    if not kept.any():
        raise ValueError("weight update needs at least one kept weight")
    if not mask.any():
        return w.copy()

    h_kk = h[np.ix_(kept, kept)]
    cond = float(np.linalg.cond(h_kk))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularHessianError("kept submatrix is singular; add damping and retry", cond)
    rhs = (h @ w)[kept]
    out = np.zeros_like(w)
    out[kept] = np.linalg.solve(h_kk, rhs)
    return out
