"""Per-subsystem quadratic storage-function certificates.

A certificate fixes V(x, xhat) = (x - xhat)' Mtil (x - xhat) together with a
feedback gain K, constants kappa_hat in (0,1) and pi > 0, and a supply-rate
matrix with blocks X11 (internal-input weight), X12 = X21', X22 (state
weight).  Feasibility of the certificate reduces to one eigenvalue test of
a block matrix difference; no SDP solver is involved, candidates are
checked as supplied (a coarse grid search over the scalar knobs is
provided).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .errors import DimensionError, UnsupportedModelError
from .model import LinearSubsystem, NonlinearSubsystem
from .msample import AuxiliarySubsystem

__all__ = [
    "StorageCertificate",
    "CertificateReport",
    "psd_check",
    "check_linear_fstf",
    "check_nonlinear_stf",
    "interface_apply",
    "grid_search_params",
]

LINEAR_MSTEP = "linear-mstep"
NONLINEAR_CLASSIC = "nonlinear-classic"

# Offset multiplier in psi = (1 + c/pi) * lambda_max(Mtil) * delta^2.
_PSI_FACTOR = {LINEAR_MSTEP: 2.0, NONLINEAR_CLASSIC: 3.0}


@dataclass(frozen=True, eq=False)
class StorageCertificate:
    """Quadratic storage-function data for one subsystem.

    kappa_coeff and psi_coeff default to the constructions
    (1 - kappa_hat) and (1 + c/pi) * lambda_max(Mtil) but may be pinned to
    published values when reproducing reported results; rho_ext is zero in
    every construction here.
    """

    Mtil: np.ndarray
    K: np.ndarray
    kappa_hat: float
    pi: float
    X11: np.ndarray
    X12: np.ndarray
    X22: np.ndarray
    delta: float
    kind: str = LINEAR_MSTEP
    kappa_coeff: float | None = None
    psi_coeff: float | None = None
    rho_ext: float = 0.0
    name: str = ""

    def __post_init__(self):
        for f in ("Mtil", "K", "X11", "X12", "X22"):
            object.__setattr__(
                self, f, np.atleast_2d(np.asarray(getattr(self, f), dtype=float))
            )
        if not (0.0 < self.kappa_hat < 1.0):
            raise DimensionError(f"{self.name}: kappa_hat must lie in (0, 1)")
        if self.pi <= 0:
            raise DimensionError(f"{self.name}: pi must be positive")
        if self.kind not in _PSI_FACTOR:
            raise DimensionError(f"{self.name}: unknown certificate kind {self.kind!r}")
        if self.kappa_coeff is None:
            object.__setattr__(self, "kappa_coeff", 1.0 - self.kappa_hat)
        if self.psi_coeff is None:
            object.__setattr__(
                self,
                "psi_coeff",
                (1.0 + _PSI_FACTOR[self.kind] / self.pi) * self.lambda_max,
            )

    @property
    def X21(self) -> np.ndarray:
        return self.X12.T

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh((self.Mtil + self.Mtil.T) / 2).min())

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh((self.Mtil + self.Mtil.T) / 2).max())

    @property
    def alpha_coeff(self) -> float:
        """alpha_i(s) = lambda_min(Mtil) * s^2."""
        return self.lambda_min

    @property
    def psi(self) -> float:
        return float(self.psi_coeff) * self.delta ** 2

    def value(self, x, xhat) -> float:
        e = np.asarray(x, dtype=float).ravel() - np.asarray(xhat, dtype=float).ravel()
        return float(e @ self.Mtil @ e)


@dataclass
class CertificateReport:
    feasible: bool
    lambda_min_residual: float
    certificate: StorageCertificate
    message: str = ""

    def lines(self) -> list[str]:
        tag = "feasible" if self.feasible else "infeasible"
        return [
            f"{self.certificate.name or 'subsystem'}: {tag} "
            f"(lambda_min residual {self.lambda_min_residual:.6g}, "
            f"psi = {self.certificate.psi_coeff:.6g} * delta^2, "
            f"kappa coeff = {self.certificate.kappa_coeff:.6g})"
        ]


def psd_check(S: np.ndarray, tol: float = 1e-9) -> tuple[bool, float]:
    """Positive-semidefiniteness up to -tol on the smallest eigenvalue.

    S is symmetrized as (S + S')/2 first and must be symmetric to about
    1e-9 relative; NaN/Inf entries raise.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.all(np.isfinite(S)):
        raise DimensionError("psd_check: matrix has NaN/Inf entries")
    scale = max(1.0, float(np.abs(S).max()))
    if np.abs(S - S.T).max() > 1e-9 * scale:
        raise DimensionError("psd_check: matrix is not symmetric")
    lam = float(np.linalg.eigvalsh((S + S.T) / 2.0).min())
    return lam >= -tol, lam


def _linear_parts(model) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A, B, D) acting on the certificate's error dynamics.

    Accepts an M-step auxiliary subsystem (identity internal-input gain) or
    an original linear subsystem checked as a classic one-step model.
    """
    if isinstance(model, AuxiliarySubsystem):
        return model.Atil, model.B, model.Dtil
    if isinstance(model, NonlinearSubsystem):
        raise UnsupportedModelError("linear check on a nonlinear subsystem")
    if isinstance(model, LinearSubsystem):
        return model.A, model.B, model.D
    raise UnsupportedModelError(f"unsupported model type {type(model).__name__}")


def _closed_loop(A: np.ndarray, B: np.ndarray, K: np.ndarray) -> np.ndarray:
    if B.shape[1] == 0:
        return np.array(A)
    if K.shape != (B.shape[1], A.shape[0]):
        raise DimensionError(
            f"K has shape {K.shape}, expected {(B.shape[1], A.shape[0])}"
        )
    return A + B @ K


def check_linear_fstf(model, cand: StorageCertificate, tol: float = 1e-9) -> CertificateReport:
    """Feasibility of the M-step matrix inequality for a linear model.

    Builds, for Ac = Atil + B K,

        LHS = [[(1+pi) Ac' M Ac,  Ac' M Dtil        ],
               [Dtil' M Ac,       (1+pi) Dtil' M Dtil]]
        RHS = [[kappa_hat M + X22, X21],
               [X12,               X11]]

    and accepts iff RHS - LHS is positive semidefinite.  On success psi is
    (1 + 2/pi) lambda_max(M) delta^2, unless the candidate pins psi_coeff.
    """
    A, B, D = _linear_parts(model)
    M = cand.Mtil
    n, p = A.shape[0], D.shape[1]
    if M.shape != (n, n):
        raise DimensionError(f"{cand.name}: Mtil must be {n}x{n}")
    if cand.X11.shape != (p, p) or cand.X22.shape != (n, n) or cand.X12.shape != (p, n):
        raise DimensionError(f"{cand.name}: supply-rate block shapes inconsistent")
    Ac = _closed_loop(A, B, cand.K)
    lhs = np.block([
        [(1.0 + cand.pi) * Ac.T @ M @ Ac, Ac.T @ M @ D],
        [D.T @ M @ Ac, (1.0 + cand.pi) * D.T @ M @ D],
    ])
    rhs = np.block([
        [cand.kappa_hat * M + cand.X22, cand.X21],
        [cand.X12, cand.X11],
    ])
    ok, lam = psd_check(rhs - lhs, tol)
    cert = cand if cand.kind == LINEAR_MSTEP else replace(cand, kind=LINEAR_MSTEP)
    return CertificateReport(feasible=ok, lambda_min_residual=lam, certificate=cert)


def check_nonlinear_stf(sub: NonlinearSubsystem, cand: StorageCertificate,
                        tol: float = 1e-9) -> CertificateReport:
    """Feasibility of the classic (one-step) inequality with a slope-restricted
    nonlinearity.

    The third block row/column carries the nonlinearity increment
    delta_bar * F (x - xhat); encoding it as a free variable certifies every
    slope delta_bar in [0, slope_hi] at once.  psi uses the (1 + 3/pi)
    multiplier.
    """
    if not isinstance(sub, NonlinearSubsystem):
        raise UnsupportedModelError("check_nonlinear_stf requires a nonlinear subsystem")
    if not np.isfinite(sub.slope_hi) or sub.slope_hi <= 0:
        raise UnsupportedModelError("slope_hi must be finite and positive")
    A, B, D, E, F = sub.A, sub.B, sub.D, sub.E, sub.F
    M = cand.Mtil
    n, p = A.shape[0], D.shape[1]
    if M.shape != (n, n):
        raise DimensionError(f"{cand.name}: Mtil must be {n}x{n}")
    Ac = _closed_loop(A, B, cand.K)
    lhs = np.block([
        [(1.0 + cand.pi) * Ac.T @ M @ Ac, Ac.T @ M @ D, Ac.T @ M @ E],
        [D.T @ M @ Ac, (1.0 + cand.pi) * D.T @ M @ D, D.T @ M @ E],
        [E.T @ M @ Ac, E.T @ M @ D, (1.0 + cand.pi) * E.T @ M @ E],
    ])
    zero = np.zeros((p, 1))
    rhs = np.block([
        [cand.kappa_hat * M + cand.X22, cand.X21, -F.T],
        [cand.X12, cand.X11, zero],
        [-F, zero.T, np.array([[2.0 / sub.slope_hi]])],
    ])
    ok, lam = psd_check(rhs - lhs, tol)
    cert = cand if cand.kind == NONLINEAR_CLASSIC else replace(cand, kind=NONLINEAR_CLASSIC)
    return CertificateReport(feasible=ok, lambda_min_residual=lam, certificate=cert)


def interface_apply(cert: StorageCertificate, x, xhat, nuhat) -> np.ndarray:
    """Refine an abstract input: nu = K (x - xhat) + nuhat."""
    x = np.asarray(x, dtype=float).ravel()
    xhat = np.asarray(xhat, dtype=float).ravel()
    nuhat = np.asarray(nuhat, dtype=float).ravel()
    if x.shape != xhat.shape:
        raise DimensionError("interface_apply: x and xhat dims differ")
    if cert.K.shape[1] != x.size or cert.K.shape[0] != nuhat.size:
        raise DimensionError("interface_apply: K shape incompatible with inputs")
    return cert.K @ (x - xhat) + nuhat


def grid_search_params(model, kappa_grid, pi_grid, K_grid, Mtil, X11, X12, X22,
                       delta: float, tol: float = 1e-9) -> StorageCertificate | None:
    """Scan finite grids of (kappa_hat, pi, K) and keep the best feasible
    candidate, ranked by the smallest eigenvalue of RHS - LHS.

    Ties break toward the earliest grid point (kappa, then pi, then K), so
    the result is deterministic.  Returns None when nothing is feasible.
    """
    nonlinear = isinstance(model, NonlinearSubsystem)
    best = None
    best_lam = -np.inf
    for kappa_hat, pi, K in product(kappa_grid, pi_grid, K_grid):
        if not (0.0 < kappa_hat < 1.0) or pi <= 0:
            continue
        cand = StorageCertificate(
            Mtil=Mtil, K=K, kappa_hat=kappa_hat, pi=pi,
            X11=X11, X12=X12, X22=X22, delta=delta,
            kind=NONLINEAR_CLASSIC if nonlinear else LINEAR_MSTEP,
        )
        rep = (check_nonlinear_stf(model, cand, tol) if nonlinear
               else check_linear_fstf(model, cand, tol))
        if rep.feasible and rep.lambda_min_residual > best_lam:
            best = rep.certificate
            best_lam = rep.lambda_min_residual
    return best
