"""Network-level composition of storage certificates and the closeness bound.

The weighted sum V = sum_i mu_i V_i is a simulation function between the
interconnected abstraction and the concrete network when three conditions
hold: a mu-weighting inequality tying each kappa_i to the squared error, a
coupling-matrix match Ga = Ga_hat, and one eigenvalue test of the assembled
supply-rate matrix.  The resulting (alpha, kappa_hat, psi) feed the
closed-form probabilistic closeness bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import DimensionError
from .certificates import StorageCertificate

__all__ = [
    "CompositionCertificate",
    "assemble_xcmp",
    "check_lmi",
    "check_mu_condition",
    "compose_fsf",
    "closeness_bound",
    "bound_report",
]


@dataclass
class CompositionCertificate:
    """Composed simulation-function data plus feasibility flags.

    alpha_coeff and kappa_hat are the proof constructions by default; both
    can be overridden (recorded in `overrides`) to pin published values.
    c_delta and c_beta are always reported as diagnostics; `psi` is only
    set when every feasibility flag holds.
    """

    mu: np.ndarray
    mu_bar: float
    lmi_ok: bool
    mu_cond_ok: bool
    coupling_match_ok: bool
    alpha_coeff: float
    kappa_hat: float
    c_delta: float
    c_beta: float
    beta_norm: float
    psi: float | None
    details: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.lmi_ok and self.mu_cond_ok and self.coupling_match_ok

    def alpha(self, s: float) -> float:
        return self.alpha_coeff * float(s) ** 2

    def psi_at(self, delta: float, beta_norm: float) -> float:
        """Overall error for a uniform state parameter delta and ||beta||."""
        return self.c_delta * float(delta) ** 2 + self.c_beta * float(beta_norm) ** 2

    @classmethod
    def from_published(cls, alpha_coeff: float, kappa_hat: float, c_delta: float,
                       c_beta: float, delta: float, beta_norm: float,
                       mu=None, mu_bar: float = 0.0) -> "CompositionCertificate":
        """Certificate carrying reported constants verbatim (no re-derivation)."""
        psi = c_delta * delta ** 2 + c_beta * beta_norm ** 2
        return cls(
            mu=np.atleast_1d(np.asarray(mu, dtype=float)) if mu is not None else np.ones(1),
            mu_bar=mu_bar,
            lmi_ok=True, mu_cond_ok=True, coupling_match_ok=True,
            alpha_coeff=alpha_coeff, kappa_hat=kappa_hat,
            c_delta=c_delta, c_beta=c_beta, beta_norm=beta_norm, psi=psi,
            details={"delta": delta},
            overrides={"source": "published"},
        )


def assemble_xcmp(certs: list[StorageCertificate], mu) -> np.ndarray:
    """Block matrix [[diag(mu_i X11_i), diag(mu_i X12_i)],
                     [diag(mu_i X21_i), diag(mu_i X22_i)]]."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.size != len(certs):
        raise DimensionError("assemble_xcmp: len(mu) != number of certificates")
    b11 = block_diag(*[m * c.X11 for m, c in zip(mu, certs)])
    b12 = block_diag(*[m * c.X12 for m, c in zip(mu, certs)])
    b21 = block_diag(*[m * c.X21 for m, c in zip(mu, certs)])
    b22 = block_diag(*[m * c.X22 for m, c in zip(mu, certs)])
    return np.block([[b11, b12], [b21, b22]])


def check_lmi(Ga: np.ndarray, Xcmp: np.ndarray, tol: float = 1e-9) -> tuple[bool, float]:
    """Evaluate [Ga; I]' Xcmp [Ga; I], symmetrize, test lambda_max <= tol."""
    Ga = np.atleast_2d(np.asarray(Ga, dtype=float))
    p, n = Ga.shape
    if Xcmp.shape != (p + n, p + n):
        raise DimensionError("check_lmi: Xcmp size does not match [Ga; I]")
    GI = np.vstack([Ga, np.eye(n)])
    S = GI.T @ Xcmp @ GI
    S = (S + S.T) / 2.0
    lam = float(np.linalg.eigvalsh(S).max())
    return lam <= tol, lam


def check_mu_condition(certs: list[StorageCertificate], mu, mu_bar: float) -> bool:
    """||x - xhat||^2 <= (mu_i / mu_bar) kappa_i(V_i) for quadratic V_i.

    With V_i quadratic and kappa_i(s) = c_i s this is the scalar test
    (mu_i / mu_bar) c_i lambda_min(Mtil_i) >= 1 for every i.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if not (0.0 < mu_bar < 1.0):
        raise DimensionError("mu_bar must lie in (0, 1)")
    if np.any(mu <= 0):
        raise DimensionError("mu weights must be positive")
    for m, c in zip(mu, certs):
        if (m / mu_bar) * c.kappa_coeff * c.lambda_min < 1.0:
            return False
    return True


def _alpha_coeff(certs, mu) -> float:
    """Network alpha(r) = a r^2 from the proof's max-formula.

    For quadratic alpha_i(s) = a_i s^2 the inverse of
    max{sum alpha_i^-1(s_i) : sum mu_i s_i = r} is r^2 / sum 1/(a_i mu_i).
    """
    s = sum(1.0 / (c.alpha_coeff * m) for m, c in zip(mu, certs))
    return 1.0 / s


def compose_fsf(certs: list[StorageCertificate], mu, mu_bar: float, beta,
                Ga: np.ndarray, Ga_hat: np.ndarray, tol: float = 1e-9,
                alpha_override: float | None = None,
                kappa_override: float | None = None) -> CompositionCertificate:
    """Compose per-subsystem certificates into a network certificate.

    beta is the vector of internal-input quantization parameters; its
    Euclidean norm enters the overall error

        psi = sum_i mu_i psi_i
              + ||beta||^2 (lambda_max(P)/mu_bar^2 + [rho(Xcmp) if Xcmp not psd])

    with P = Xcmp' [Ga; I] [Ga; I]' Xcmp.  When any feasibility flag fails
    the certificate carries the flags and diagnostics but no psi.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    Ga = np.atleast_2d(np.asarray(Ga, dtype=float))
    Ga_hat = np.atleast_2d(np.asarray(Ga_hat, dtype=float))

    Xcmp = assemble_xcmp(certs, mu)
    lmi_ok, lam_S = check_lmi(Ga, Xcmp, tol)
    mu_ok = check_mu_condition(certs, mu, mu_bar)
    coupling_ok = Ga.shape == Ga_hat.shape and bool(np.allclose(Ga, Ga_hat, atol=tol))

    p, n = Ga.shape
    GI = np.vstack([Ga, np.eye(n)])
    P = Xcmp.T @ GI @ GI.T @ Xcmp
    lam_P = float(np.linalg.eigvalsh((P + P.T) / 2.0).max())
    eig_X = np.linalg.eigvalsh((Xcmp + Xcmp.T) / 2.0)
    rho_X = float(np.abs(eig_X).max())
    xcmp_psd_fails = float(eig_X.max()) > tol

    c_beta = lam_P / mu_bar ** 2 + (rho_X if xcmp_psd_fails else 0.0)
    c_delta = float(sum(m * c.psi_coeff for m, c in zip(mu, certs)))
    psi_sum = float(sum(m * c.psi for m, c in zip(mu, certs)))
    beta_norm = float(np.linalg.norm(beta))

    kappa_hat = (1.0 - mu_bar) * min(c.kappa_coeff for c in certs)
    alpha_coeff = _alpha_coeff(certs, mu)
    overrides = {}
    if alpha_override is not None:
        overrides["alpha_coeff"] = {"computed": alpha_coeff, "override": alpha_override}
        alpha_coeff = float(alpha_override)
    if kappa_override is not None:
        overrides["kappa_hat"] = {"computed": kappa_hat, "override": kappa_override}
        kappa_hat = float(kappa_override)

    feasible = lmi_ok and mu_ok and coupling_ok
    psi = psi_sum + beta_norm ** 2 * c_beta if feasible else None

    return CompositionCertificate(
        mu=mu, mu_bar=mu_bar,
        lmi_ok=lmi_ok, mu_cond_ok=mu_ok, coupling_match_ok=coupling_ok,
        alpha_coeff=alpha_coeff, kappa_hat=kappa_hat,
        c_delta=c_delta, c_beta=c_beta, beta_norm=beta_norm, psi=psi,
        details={
            "lambda_max_S": lam_S,
            "lambda_max_P": lam_P,
            "rho_xcmp": rho_X,
            "xcmp_psd": not xcmp_psd_fails,
            "psi_sum": psi_sum,
            "psi_unverified": psi_sum + beta_norm ** 2 * c_beta,
        },
        overrides=overrides,
    )


def closeness_bound(cc: CompositionCertificate, V0: float, eps: float, Td: int,
                    nu_sup: float = 0.0, psi_hat: float | None = None) -> float:
    """Probability bound on the trajectories deviating by >= eps at the
    sampling instants over horizon Td.

    psi_hat defaults to rho_ext(nu_sup) + psi with rho_ext identically zero
    in every construction here; the result is clamped into [0, 1] (values
    above 1 are vacuous).
    """
    return bound_report(cc, V0, eps, Td, nu_sup, psi_hat)["bound"]


def bound_report(cc: CompositionCertificate, V0: float, eps: float, Td: int,
                 nu_sup: float = 0.0, psi_hat: float | None = None) -> dict:
    if eps <= 0 or Td < 0 or V0 < 0:
        raise DimensionError("closeness_bound requires eps > 0, Td >= 0, V0 >= 0")
    if psi_hat is None:
        if cc.psi is None:
            raise DimensionError("certificate carries no psi (infeasible composition)")
        psi_hat = cc.psi + 0.0 * nu_sup  # rho_ext = 0 throughout
    alpha_eps = cc.alpha(eps)
    if alpha_eps <= 0:
        raise DimensionError("alpha(eps) must be positive")
    kh = cc.kappa_hat
    if not (0.0 < kh < 1.0):
        raise DimensionError("composed kappa_hat must lie in (0, 1)")
    if alpha_eps >= psi_hat / kh:
        branch = "decay"
        raw = 1.0 - (1.0 - V0 / alpha_eps) * (1.0 - psi_hat / alpha_eps) ** Td
    else:
        branch = "offset"
        raw = (V0 / alpha_eps) * (1.0 - kh) ** Td + (psi_hat / (kh * alpha_eps)) * (
            1.0 - (1.0 - kh) ** Td
        )
    return {
        "bound": float(min(max(raw, 0.0), 1.0)),
        "raw": float(raw),
        "branch": branch,
        "alpha_eps": float(alpha_eps),
        "psi_hat": float(psi_hat),
        "kappa_hat": float(kh),
    }
