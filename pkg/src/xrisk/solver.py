"""Per-environment optimal predictors and inverse-Hessian-vector products.

The optimal predictor on one environment is found by damped Newton with a
backtracking line search on the logistic risk. The Hessian at the optimum
feeds a truncated Neumann series for inverse-Hessian-vector products:
with H' = H + eps*I and a scaling c keeping the spectral radius of
(I - c H') below one, the series c * sum_{i=0..j} (I - c H')^i v converges
geometrically to H'^{-1} v.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger("xrisk.solver")


class SolverError(RuntimeError):
    """Numerical failure inside the inner solver."""


class SingleClassError(ValueError):
    """Raised for environments whose sample contains only one label."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logistic_risk(features: np.ndarray, labels: np.ndarray,
                  w: np.ndarray) -> float:
    margins = labels * (features @ w)
    return float(np.mean(softplus(-margins)))


def logistic_risk_grad(features: np.ndarray, labels: np.ndarray,
                       w: np.ndarray) -> np.ndarray:
    margins = labels * (features @ w)
    coeff = -sigmoid(-margins) * labels
    return features.T @ coeff / features.shape[0]


def logistic_risk_hessian(features: np.ndarray, labels: np.ndarray,
                          w: np.ndarray) -> np.ndarray:
    margins = labels * (features @ w)
    s = sigmoid(margins)
    weights = s * (1.0 - s)
    return (features * weights[:, None]).T @ features / features.shape[0]


@dataclass
class SolveResult:
    w: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool


def solve_optimal_predictor(features: np.ndarray, labels: np.ndarray,
                            tol: float = 1e-8, max_iters: int = 100,
                            newton_damping: float = 1e-4,
                            trust_radius: float = 1e3,
                            w0: np.ndarray | None = None) -> SolveResult:
    """Damped Newton with backtracking line search on the logistic risk.

    Separable samples have no finite optimum; the trust region caps the
    weight norm and the solver halts at max_iters reporting the achieved
    gradient norm instead of diverging.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if np.all(labels == labels[0]):
        raise SingleClassError(
            "predictor transfer undefined for single-class group")
    n, d = features.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)

    risk = logistic_risk(features, labels, w)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        g = logistic_risk_grad(features, labels, w)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return SolveResult(w=w, grad_norm=gnorm, iterations=iterations - 1,
                               converged=True)
        h = logistic_risk_hessian(features, labels, w)
        h[np.diag_indices_from(h)] += newton_damping
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            step = -g
        # Backtracking: halve until Armijo decrease holds.
        t = 1.0
        descent = float(g @ step)
        for _ in range(60):
            cand = w + t * step
            cand_risk = logistic_risk(features, labels, cand)
            if cand_risk <= risk + 1e-4 * t * descent:
                break
            t *= 0.5
        else:
            cand = w
            cand_risk = risk
        w = cand
        wnorm = float(np.linalg.norm(w))
        if wnorm > trust_radius:
            w = w * (trust_radius / wnorm)
            cand_risk = logistic_risk(features, labels, w)
        risk = cand_risk

    gnorm = float(np.linalg.norm(logistic_risk_grad(features, labels, w)))
    return SolveResult(w=w, grad_norm=gnorm, iterations=max_iters,
                       converged=gnorm <= tol)


@dataclass
class HessianOperator:
    """Symmetric PSD Hessian, explicit or matrix-free, plus its damping.

    apply() includes the operator's own damping. lipschitz_bound, when
    known, upper-bounds the largest eigenvalue and seeds the Neumann
    scaling without an eigendecomposition.
    """

    matrix: np.ndarray | None = None
    hvp: Callable[[np.ndarray], np.ndarray] | None = None
    damping: float = 0.0
    lipschitz_bound: float | None = None

    def __post_init__(self):
        if (self.matrix is None) == (self.hvp is None):
            raise SolverError("give exactly one of matrix or hvp")
        if self.damping < 0:
            raise SolverError("damping must be non-negative")
        if self.matrix is not None:
            asym = float(np.max(np.abs(self.matrix - self.matrix.T)))
            if asym > 1e-10:
                raise SolverError(f"Hessian asymmetry {asym} exceeds 1e-10")

    @property
    def dim(self) -> int:
        if self.matrix is not None:
            return self.matrix.shape[0]
        raise SolverError("matrix-free operator has no stored dimension")

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            out = self.matrix @ v
        else:
            out = self.hvp(v)
        if self.damping:
            out = out + self.damping * v
        return out

    def effective_matrix(self) -> np.ndarray:
        if self.matrix is None:
            raise SolverError("matrix-free operator has no explicit form")
        return self.matrix + self.damping * np.eye(self.matrix.shape[0])

    def solve(self, v: np.ndarray, extra_damping: float = 0.0) -> np.ndarray:
        """Exact dense solve (H + extra*I)^-1 v, the validation path."""
        h = self.effective_matrix()
        if extra_damping:
            h = h + extra_damping * np.eye(h.shape[0])
        return np.linalg.solve(h, v)


def hessian_at(w: np.ndarray, features: np.ndarray, labels: np.ndarray,
               singular_floor: float = 1e-4) -> HessianOperator:
    """Explicit logistic Hessian at w; damping repairs near-singularity.

    The repair event is logged rather than raised: separable batches give
    legitimately singular Hessians.
    """
    h = logistic_risk_hessian(features, np.asarray(labels, dtype=np.float64), w)
    h = 0.5 * (h + h.T)
    min_eig = float(np.linalg.eigvalsh(h)[0])
    damping = 0.0
    if min_eig < singular_floor:
        damping = singular_floor
        logger.info("hessian_at: min eigenvalue %.3e below %.1e, damping added",
                    min_eig, singular_floor)
    lip = 0.25 * float(np.max(np.sum(features ** 2, axis=1)))
    return HessianOperator(matrix=h, damping=damping, lipschitz_bound=lip)


@dataclass(frozen=True)
class NeumannConfig:
    """Truncated-series parameters: j terms, scaling c, damping eps."""

    steps: int = 10
    scaling: float | None = None
    damping: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise SolverError(f"Neumann steps must be >= 1, got {self.steps}")
        if self.scaling is not None and self.scaling <= 0:
            raise SolverError("Neumann scaling must be positive")
        if self.damping < 0:
            raise SolverError("Neumann damping must be non-negative")


def _auto_scaling(op: HessianOperator, eps: float, dim: int) -> float:
    if op.lipschitz_bound is not None:
        return 1.0 / (op.lipschitz_bound + op.damping + eps)
    if op.matrix is not None:
        top = float(np.linalg.eigvalsh(op.effective_matrix())[-1]) + eps
        return 1.0 / top
    # Matrix-free with unknown bound: power iteration on H'.
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    top = 1.0
    for _ in range(30):
        hv = op.apply(v) + eps * v
        top = float(np.linalg.norm(hv))
        if top == 0.0:
            return 1.0
        v = hv / top
    return 1.0 / (1.05 * top)


def neumann_inv_hvp(op: HessianOperator, v: np.ndarray, cfg: NeumannConfig,
                    dim: int | None = None) -> np.ndarray:
    """c * sum_{i=0..j} (I - c(H + eps I))^i v.

    Exact solve of H + eps*I in the limit; geometric error decay in j when
    the spectral radius of (I - c H') is below one, which the automatic
    scaling guarantees for PSD H.
    """
    v = np.asarray(v, dtype=np.float64)
    dim = v.shape[0] if dim is None else dim
    eps = cfg.damping
    c = cfg.scaling if cfg.scaling is not None else _auto_scaling(op, eps, dim)
    term = v.copy()
    acc = v.copy()
    for i in range(1, cfg.steps + 1):
        term = term - c * (op.apply(term) + eps * term)
        if not np.all(np.isfinite(term)):
            raise SolverError(f"non-finite intermediate at Neumann step {i}")
        acc += term
    return c * acc


def transfer_vector(op: HessianOperator, transfer_grad: np.ndarray,
                    cfg: NeumannConfig, exact: bool = False) -> np.ndarray:
    """v_Q: inverse-Hessian-preconditioned transfer-loss gradient.

    H is symmetric so the row-vector convention reduces to solving
    H' v = g. The exact flag swaps the Neumann series for a dense solve,
    the validation path.
    """
    g = np.asarray(transfer_grad, dtype=np.float64)
    if exact:
        return op.solve(g, extra_damping=cfg.damping)
    return neumann_inv_hvp(op, g, cfg)
