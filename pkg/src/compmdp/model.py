"""Domain types for stochastic control subsystems and interconnected networks.

A subsystem is the discrete-time recursion

    x(k+1) = A x(k) + B nu(k) + D w(k) + R varsigma(k)        (linear)
    x(k+1) = ... + E phi(F x(k))                              (nonlinear)

with external input nu, internal (coupling) input w and i.i.d. Gaussian
noise varsigma.  A network couples the stacked internal inputs to the
stacked states through a matrix G.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DimensionError

__all__ = [
    "GaussianNoise",
    "IntervalBox",
    "LinearSubsystem",
    "NonlinearSubsystem",
    "Network",
    "Subsystem",
    "ValidationReport",
    "NONLINEARITIES",
    "eval_dynamics",
    "validate_network",
    "interval_image",
]


# Closed registry of scalar nonlinearities so configs stay declarative.
NONLINEARITIES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "identity": lambda s: s,
    "zero": lambda s: np.zeros_like(s),
    "tanh": np.tanh,
}


def _ro(a) -> np.ndarray:
    """Return a read-only float array (immutability of model types)."""
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianNoise:
    """Independent zero-mean Gaussian noise with per-dimension std."""

    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "std", _ro(np.atleast_1d(self.std)))
        if self.std.ndim != 1 or np.any(self.std <= 0):
            raise DimensionError("noise std must be a vector of positives")

    @property
    def dim(self) -> int:
        return self.std.size


@dataclass(frozen=True, eq=False)
class IntervalBox:
    """Axis-aligned box, possibly zero-dimensional."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _ro(np.atleast_1d(np.asarray(self.lower, dtype=float)))
        hi = _ro(np.atleast_1d(np.asarray(self.upper, dtype=float)))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("box bounds must be vectors of equal length")
        if lo.size and (not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi))):
            raise DimensionError("box bounds must be finite")
        if np.any(lo > hi):
            raise DimensionError("box lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, other: "IntervalBox", tol: float = 1e-12) -> bool:
        if other.dim != self.dim:
            return False
        return bool(
            np.all(other.lower >= self.lower - tol)
            and np.all(other.upper <= self.upper + tol)
        )


@dataclass(frozen=True, eq=False)
class LinearSubsystem:
    """Linear stochastic control subsystem (A, B, D, R) with bounded sets.

    B may have zero columns when the subsystem has no external input.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    R: np.ndarray
    state_box: IntervalBox
    ext_input_box: IntervalBox
    int_input_box: IntervalBox
    noise: GaussianNoise
    name: str = ""

    def __post_init__(self):
        for f in ("A", "B", "D", "R"):
            object.__setattr__(self, f, _ro(np.atleast_2d(getattr(self, f))))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"{self.name}: A must be square")
        for f in ("B", "D", "R"):
            if getattr(self, f).shape[0] != n:
                raise DimensionError(f"{self.name}: {f} must have {n} rows")
        if self.state_box.dim != n:
            raise DimensionError(f"{self.name}: state box dim != n")
        if self.ext_input_box.dim != self.B.shape[1]:
            raise DimensionError(f"{self.name}: external input box dim != cols(B)")
        if self.int_input_box.dim != self.D.shape[1]:
            raise DimensionError(f"{self.name}: internal input box dim != cols(D)")
        if self.noise.dim != self.R.shape[1]:
            raise DimensionError(f"{self.name}: noise dim != cols(R)")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.D.shape[1]

    def drift(self, x, nu, w) -> np.ndarray:
        """Noise-free part of the one-step map."""
        x = np.asarray(x, dtype=float).reshape(self.n)
        nu = np.asarray(nu, dtype=float).reshape(self.m)
        w = np.asarray(w, dtype=float).reshape(self.p)
        return self.A @ x + self.B @ nu + self.D @ w


@dataclass(frozen=True, eq=False)
class NonlinearSubsystem(LinearSubsystem):
    """Linear subsystem plus a slope-restricted scalar nonlinearity E*phi(F x).

    The difference quotient of phi must lie in [slope_lo, slope_hi] with
    slope_hi > 0 finite.
    """

    E: np.ndarray = field(default=None)
    F: np.ndarray = field(default=None)
    slope_lo: float = 0.0
    slope_hi: float = 1.0
    phi: str = "sin"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "E", _ro(np.atleast_2d(self.E)))
        object.__setattr__(self, "F", _ro(np.atleast_2d(self.F)))
        n = self.n
        if self.E.shape != (n, 1):
            raise DimensionError(f"{self.name}: E must be {n}x1")
        if self.F.shape != (1, n):
            raise DimensionError(f"{self.name}: F must be 1x{n}")
        if self.phi not in NONLINEARITIES:
            raise DimensionError(f"{self.name}: unknown nonlinearity {self.phi!r}")
        if not (self.slope_lo <= self.slope_hi) or not (self.slope_hi > 0):
            raise DimensionError(f"{self.name}: slope bounds must satisfy lo<=hi, hi>0")
        if not np.isfinite(self.slope_hi):
            raise DimensionError(f"{self.name}: slope_hi must be finite")

    def phi_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        return NONLINEARITIES[self.phi]

    def drift(self, x, nu, w) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n)
        lin = super().drift(x, nu, w)
        return lin + (self.E @ self.phi_fn()(self.F @ x)).reshape(self.n)

    def check_slope(self, samples: int = 200, tol: float = 1e-9) -> bool:
        """Sample difference quotients of phi over the state box image of F."""
        lo, hi = interval_image(self.F, [self.state_box])
        span = max(float(hi[0] - lo[0]), 1.0)
        pts = np.linspace(float(lo[0]) - span, float(hi[0]) + span, samples)
        fn = NONLINEARITIES[self.phi]
        c, d = np.meshgrid(pts, pts)
        mask = np.abs(c - d) > 1e-8
        quot = (fn(c[mask]) - fn(d[mask])) / (c[mask] - d[mask])
        return bool(
            np.all(quot >= self.slope_lo - tol) and np.all(quot <= self.slope_hi + tol)
        )


Subsystem = Union[LinearSubsystem, NonlinearSubsystem]


@dataclass(frozen=True, eq=False)
class Network:
    """Interconnection of subsystems through the coupling matrix G.

    G maps the stacked state vector to the stacked internal-input vector.
    """

    subsystems: tuple
    G: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        object.__setattr__(self, "G", _ro(np.atleast_2d(self.G)))

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.subsystems)

    @property
    def p_total(self) -> int:
        return sum(s.p for s in self.subsystems)

    def state_offsets(self) -> list[int]:
        offs = [0]
        for s in self.subsystems:
            offs.append(offs[-1] + s.n)
        return offs

    def int_input_offsets(self) -> list[int]:
        offs = [0]
        for s in self.subsystems:
            offs.append(offs[-1] + s.p)
        return offs

    def is_linear(self) -> bool:
        return all(not isinstance(s, NonlinearSubsystem) for s in self.subsystems)

    def stacked_state_box(self) -> IntervalBox:
        lo = np.concatenate([s.state_box.lower for s in self.subsystems])
        hi = np.concatenate([s.state_box.upper for s in self.subsystems])
        return IntervalBox(lo, hi)

    def stacked_int_input_box(self) -> IntervalBox:
        lo = np.concatenate([s.int_input_box.lower for s in self.subsystems])
        hi = np.concatenate([s.int_input_box.upper for s in self.subsystems])
        return IntervalBox(lo, hi)


@dataclass
class ValidationReport:
    """Outcome of structural network validation; never raises."""

    errors: list = field(default_factory=list)
    image_box: IntervalBox | None = None
    target_box: IntervalBox | None = None
    well_posed: bool = False

    @property
    def valid(self) -> bool:
        return not self.errors and self.well_posed

    def lines(self) -> list[str]:
        out = [f"dimension errors: {len(self.errors)}"]
        out.extend(f"  - {e}" for e in self.errors)
        if self.image_box is not None and self.target_box is not None:
            out.append(f"coupling image lower: {np.round(self.image_box.lower, 6).tolist()}")
            out.append(f"coupling image upper: {np.round(self.image_box.upper, 6).tolist()}")
            out.append(f"well-posed (G * X within W): {self.well_posed}")
        return out


def interval_image(M: np.ndarray, boxes: Sequence[IntervalBox]) -> tuple[np.ndarray, np.ndarray]:
    """Exact interval-arithmetic image of a product of boxes under x -> M x."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lo = np.concatenate([b.lower for b in boxes]) if boxes else np.zeros(0)
    hi = np.concatenate([b.upper for b in boxes]) if boxes else np.zeros(0)
    if M.shape[1] != lo.size:
        raise DimensionError("interval_image: column count does not match box dims")
    Mp = np.clip(M, 0.0, None)
    Mm = np.clip(M, None, 0.0)
    return Mp @ lo + Mm @ hi, Mp @ hi + Mm @ lo


def eval_dynamics(sub: Subsystem, x, nu, w, varsigma) -> np.ndarray:
    """One step of the subsystem map, including the noise term R*varsigma."""
    varsigma = np.asarray(varsigma, dtype=float).reshape(sub.R.shape[1])
    return sub.drift(x, nu, w) + sub.R @ varsigma


def validate_network(net: Network) -> ValidationReport:
    """Check dimensional consistency and well-posedness of the coupling.

    All findings are report entries; nothing raises.  Well-posedness is the
    interval containment of G applied to the product of state boxes inside
    the product of internal-input boxes (exact for linear maps).
    """
    rep = ValidationReport()
    n_total = net.n_total
    p_total = net.p_total
    if net.G.shape != (p_total, n_total):
        rep.errors.append(
            f"G has shape {net.G.shape}, expected ({p_total}, {n_total}) "
            f"from stacked internal-input/state dims"
        )
        return rep
    for s in net.subsystems:
        if isinstance(s, NonlinearSubsystem) and not s.check_slope():
            rep.errors.append(
                f"{s.name}: sampled difference quotients of {s.phi!r} leave "
                f"[{s.slope_lo}, {s.slope_hi}]"
            )
    state_boxes = [s.state_box for s in net.subsystems]
    lo, hi = interval_image(net.G, state_boxes)
    rep.image_box = IntervalBox(lo, hi)
    rep.target_box = net.stacked_int_input_box()
    rep.well_posed = rep.target_box.contains(rep.image_box)
    return rep
