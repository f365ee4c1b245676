"""Kernel regression over observed pixels: exact solve and EigenPro.

The iterative path runs preconditioned full-gradient descent

    alpha <- alpha - eta * P (K alpha - y)

where P damps the top-s eigendirections of the kernel matrix down to the
(s+1)-th eigenvalue, which permits the much larger step eta = safety /
lambda_{s+1} while staying stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .cntk import KernelBlock
from .errors import Divergence, IndexMismatch, NotPositiveDefinite

DEFAULT_TOP_S = 10
DEFAULT_SAFETY = 1.5
DEFAULT_EPOCHS = 350

# Eigendirections this far below the top eigenvalue are numerically absent.
_EIG_FLOOR_REL = 1e-12


@dataclass
class SolveState:
    """Kernel-expansion coefficients over the observed pixel set."""

    alpha: np.ndarray
    pixel_index: np.ndarray
    iterations: int
    final_residual: float
    residual_trace: Optional[list[float]] = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64)
        if self.alpha.shape != self.pixel_index.shape:
            raise ValueError("alpha and pixel_index must align")
        if not (np.isfinite(self.final_residual) and self.final_residual >= 0):
            raise ValueError("residual must be finite and non-negative")

    def to_dict(self, config_echo: Optional[dict] = None) -> dict:
        out = {
            "alpha": self.alpha.tolist(),
            "pixel_index": self.pixel_index.tolist(),
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "residual_trace": self.residual_trace,
        }
        if config_echo is not None:
            out["config"] = dict(config_echo)
        return out


@dataclass
class Preconditioner:
    """Top-eigenvalue damping operator plus its stable step size.

    Action: P v = v - sum_i (1 - damping / lambda_i) <e_i, v> e_i over the
    retained top eigenpairs.
    """

    eigenvalues: np.ndarray  # descending, length s
    eigenvectors: np.ndarray  # (n, s), orthonormal columns
    damping: float  # lambda_{s+1}
    step_size: float

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=np.float64)
        if self.step_size <= 0:
            raise ValueError("step size must be positive")

    @property
    def s(self) -> int:
        return len(self.eigenvalues)

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.s == 0:
            return v
        coeff = (1.0 - self.damping / self.eigenvalues) * (self.eigenvectors.T @ v)
        return v - self.eigenvectors @ coeff


def _principal_matrix(block: KernelBlock) -> np.ndarray:
    if not np.array_equal(block.rows, block.cols):
        raise IndexMismatch("expected a principal kernel block (rows == cols)")
    return np.asarray(block.entries, dtype=np.float64)


def _relative_residual(k: np.ndarray, alpha: np.ndarray, y: np.ndarray) -> float:
    ynorm = np.linalg.norm(y)
    return float(np.linalg.norm(k @ alpha - y) / (ynorm if ynorm > 0 else 1.0))


def solve_exact(block: KernelBlock, y, jitter: Optional[float] = None) -> SolveState:
    """Solve (K + jitter I) alpha = y by Cholesky factorization.

    jitter defaults to 1e-6 * trace(K)/n; pass 0 to solve the raw system.
    On factorization failure the jitter escalates by 10x up to three times
    before giving up. The reported residual is against the unjittered K.
    """
    k = _principal_matrix(block)
    y = np.asarray(y, dtype=np.float64)
    n = k.shape[0]
    if y.shape != (n,):
        raise IndexMismatch(f"y has shape {y.shape}, expected ({n},)")

    default = 1e-6 * np.trace(k) / n
    j0 = default if jitter is None else float(jitter)
    ladder = [j0] + [(j0 if j0 > 0 else default) * 10**i for i in range(1, 4)]
    last_exc = None
    for j in ladder:
        try:
            cho = scipy.linalg.cho_factor(k + j * np.eye(n), lower=True)
            alpha = scipy.linalg.cho_solve(cho, y)
            break
        except np.linalg.LinAlgError as exc:  # pragma: no cover - rare path
            last_exc = exc
    else:
        raise NotPositiveDefinite(
            f"kernel system not factorizable after jitter ladder {ladder}: {last_exc}"
        )
    return SolveState(
        alpha=alpha,
        pixel_index=block.rows,
        iterations=0,
        final_residual=_relative_residual(k, alpha, y),
    )


def build_preconditioner(
    block: KernelBlock,
    s: int = DEFAULT_TOP_S,
    safety: float = DEFAULT_SAFETY,
) -> Preconditioner:
    """Top-(s+1) eigendecomposition of the kernel turned into a damping map.

    With s = 0 the action is the identity and the step is safety/lambda_1,
    i.e. plain gradient descent. Eigenvalues below 1e-12 * lambda_1 are
    treated as absent directions and dropped from the damping sum.
    """
    k = _principal_matrix(block)
    n = k.shape[0]
    if not 0 <= s < n:
        raise ValueError(f"need 0 <= s < n, got s={s}, n={n}")
    try:
        lam, vec = scipy.linalg.eigh(k)
    except np.linalg.LinAlgError:  # pragma: no cover - eigh on symmetric input
        lam, vec = None, None
    if lam is None:
        # Fall back to an unpreconditioned step sized by the Frobenius bound.
        top = float(np.linalg.norm(k, ord="fro"))
        return Preconditioner(
            eigenvalues=np.empty(0),
            eigenvectors=np.empty((n, 0)),
            damping=top,
            step_size=safety / top,
        )
    order = np.argsort(lam)[::-1][: s + 1]
    lam = lam[order]
    vec = vec[:, order]
    damping = float(lam[s])
    if damping <= 0:
        raise NotPositiveDefinite(
            f"(s+1)-th eigenvalue is {damping:g}; preconditioner needs it positive"
        )
    keep = lam[:s] > _EIG_FLOOR_REL * lam[0]
    return Preconditioner(
        eigenvalues=lam[:s][keep],
        eigenvectors=vec[:, :s][:, keep],
        damping=damping,
        step_size=safety / damping,
    )


def eigenpro_solve(
    block: KernelBlock,
    y,
    pre: Preconditioner,
    epochs: int = DEFAULT_EPOCHS,
) -> SolveState:
    """Run exactly ``epochs`` preconditioned full-gradient iterations.

    Starts from alpha = 0 and records the relative residual after every
    epoch. Aborts with Divergence if the residual exceeds 10x its initial
    value.
    """
    k = _principal_matrix(block)
    y = np.asarray(y, dtype=np.float64)
    n = k.shape[0]
    if y.shape != (n,):
        raise IndexMismatch(f"y has shape {y.shape}, expected ({n},)")

    ynorm = np.linalg.norm(y)
    denom = ynorm if ynorm > 0 else 1.0
    alpha = np.zeros(n)
    trace: list[float] = []
    initial = float(np.linalg.norm(y) / denom)  # residual of alpha = 0
    for t in range(epochs):
        grad = k @ alpha - y
        if t > 0:
            trace.append(float(np.linalg.norm(grad) / denom))
            if trace[-1] > 10.0 * max(initial, 1e-300):
                raise Divergence(
                    f"residual {trace[-1]:.3e} exceeded 10x initial after {t} epochs",
                    residual_trace=trace,
                )
        alpha = alpha - pre.step_size * pre.apply(grad)
    final = _relative_residual(k, alpha, y)
    if epochs > 0:
        trace.append(final)
    return SolveState(
        alpha=alpha,
        pixel_index=block.rows,
        iterations=epochs,
        final_residual=final,
        residual_trace=trace,
    )


def predict(block_pt: KernelBlock, state: SolveState) -> np.ndarray:
    """Kernel-expansion prediction at the block's row pixels.

    The block's columns must be the solve's observed pixel set, same order.
    """
    if not np.array_equal(block_pt.cols, state.pixel_index):
        raise IndexMismatch("prediction block columns do not match solve index set")
    return np.asarray(block_pt.entries, dtype=np.float64) @ state.alpha
