"""M-step resampling of linear networks into auxiliary subsystems.

Closing the coupling w = G x turns the stacked network into
x(k+1) = (Abar + Dbar G) x(k) + Bbar nu(k) + Rbar varsigma(k).  Looking M
steps ahead and re-partitioning the propagation matrix per subsystem gives
the auxiliary dynamics

    x_i(k+M) = Atil_i x_i(k) + B_i nu_i(k+M-1) + w_i(k) + Rtil_i vstil_i(k)

where the new internal input w_i collects the off-diagonal blocks of
(Abar + Dbar G)^M acting on the other subsystems' states, with the external
input nonzero only at the last step of each M-frame.  A subsystem that is
unstable on its own can become stable here, which is the whole point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UnsupportedModelError
from .model import (
    GaussianNoise,
    IntervalBox,
    Network,
    NonlinearSubsystem,
    interval_image,
    _ro,
)

__all__ = [
    "AuxiliarySubsystem",
    "AuxiliaryNetwork",
    "closed_matrix",
    "msample_network",
    "aux_noise_covariance",
    "oracle_simulate",
]


@dataclass(frozen=True, eq=False)
class AuxiliarySubsystem:
    """One M-step auxiliary subsystem.

    The internal-input gain is an implicit identity selector: w_i already
    carries the off-diagonal coupling, so Dtil = I_n.  noise_layout lists,
    per column block of Rtil, which original (subsystem index, time offset)
    noise it multiplies.
    """

    Atil: np.ndarray
    B: np.ndarray
    Rtil: np.ndarray
    noise_layout: tuple            # ((subsystem j, offset t), ...) per block
    noise_std: np.ndarray          # per-column std of the stacked noise vector
    M: int
    state_box: IntervalBox
    ext_input_box: IntervalBox
    int_input_box: IntervalBox     # box for the new internal input w_i
    name: str = ""

    def __post_init__(self):
        for f in ("Atil", "B", "Rtil"):
            object.__setattr__(self, f, _ro(np.atleast_2d(getattr(self, f))))
        object.__setattr__(self, "noise_std", _ro(np.atleast_1d(self.noise_std)))
        object.__setattr__(self, "noise_layout", tuple(map(tuple, self.noise_layout)))
        n = self.Atil.shape[0]
        if self.Atil.shape != (n, n):
            raise DimensionError(f"{self.name}: Atil must be square")
        if self.B.shape[0] != n or self.Rtil.shape[0] != n:
            raise DimensionError(f"{self.name}: B/Rtil row count != n")
        if self.M < 1:
            raise DimensionError(f"{self.name}: M must be >= 1")
        if self.noise_std.size != self.Rtil.shape[1]:
            raise DimensionError(f"{self.name}: noise std length != cols(Rtil)")

    @property
    def n(self) -> int:
        return self.Atil.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def Dtil(self) -> np.ndarray:
        return np.eye(self.n)


@dataclass(frozen=True, eq=False)
class AuxiliaryNetwork:
    aux_subsystems: tuple
    Ga: np.ndarray
    M: int

    def __post_init__(self):
        object.__setattr__(self, "aux_subsystems", tuple(self.aux_subsystems))
        object.__setattr__(self, "Ga", _ro(np.atleast_2d(self.Ga)))

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.aux_subsystems)

    def state_offsets(self) -> list[int]:
        offs = [0]
        for s in self.aux_subsystems:
            offs.append(offs[-1] + s.n)
        return offs

    def closed_matrix(self) -> np.ndarray:
        """Reassemble (Abar + Dbar G)^M from the diagonal and coupling blocks."""
        offs = self.state_offsets()
        C = np.array(self.Ga, dtype=float)
        for i, sub in enumerate(self.aux_subsystems):
            sl = slice(offs[i], offs[i + 1])
            C[sl, sl] += sub.Atil
        return C


def closed_matrix(net: Network) -> np.ndarray:
    """Closed-loop propagation matrix Abar + Dbar G of a linear network."""
    if not net.is_linear():
        raise UnsupportedModelError("closed_matrix requires a linear network")
    offs = net.state_offsets()
    ioffs = net.int_input_offsets()
    n = net.n_total
    C = np.zeros((n, n))
    for i, sub in enumerate(net.subsystems):
        sl = slice(offs[i], offs[i + 1])
        C[sl, sl] += sub.A
        C[sl, :] += sub.D @ net.G[ioffs[i]:ioffs[i + 1], :]
    return C


def _noise_layout(net: Network, i: int, M: int) -> list[tuple[int, int]]:
    """Noise layout of auxiliary subsystem i: own subsystem contributes
    offsets 0..M-1, every other subsystem offsets 0..M-2, ordered by
    subsystem index then offset."""
    layout = []
    N = len(net.subsystems)
    for j in range(N):
        t_max = M if j == i else M - 1
        for t in range(t_max):
            layout.append((j, t))
    return layout


def msample_network(net: Network, M: int, drop_zero_noise: bool = True) -> AuxiliaryNetwork:
    """Build the M-step auxiliary network of a linear interconnected network.

    Atil_i is the i-th diagonal block of (Abar + Dbar G)^M and Ga the
    off-diagonal remainder; B_i is unchanged because the external input only
    enters at the last step of each frame.  Rtil_i stacks, for each
    (subsystem j, offset t) in the layout, the (i, j) block of
    (Abar + Dbar G)^(M-1-t) Rbar.  Columns that are identically zero are
    dropped from layout and Rtil when drop_zero_noise is set.
    """
    if M < 1:
        raise DimensionError("M must be a positive integer")
    if not net.is_linear():
        raise UnsupportedModelError("msample_network requires a linear network")
    C = closed_matrix(net)
    CM = np.linalg.matrix_power(C, M)
    offs = net.state_offsets()
    # Powers C^(M-1-t) for t = 0..M-1.
    powers = [np.linalg.matrix_power(C, M - 1 - t) for t in range(M)]

    Ga = np.array(CM)
    aux_subs = []
    for i, sub in enumerate(net.subsystems):
        sl = slice(offs[i], offs[i + 1])
        Atil = CM[sl, sl].copy()
        Ga[sl, sl] = 0.0
        layout = _noise_layout(net, i, M)
        blocks, stds, kept = [], [], []
        for (j, t) in layout:
            slj = slice(offs[j], offs[j + 1])
            blk = powers[t][sl, slj] @ net.subsystems[j].R
            if drop_zero_noise and not np.any(blk):
                continue
            blocks.append(blk)
            stds.append(net.subsystems[j].noise.std)
            kept.append((j, t))
        if blocks:
            Rtil = np.hstack(blocks)
            std = np.concatenate(stds)
        else:
            Rtil = np.zeros((sub.n, 0))
            std = np.zeros(0)
        aux_subs.append(
            AuxiliarySubsystem(
                Atil=Atil,
                B=sub.B,
                Rtil=Rtil,
                noise_layout=kept,
                noise_std=std,
                M=M,
                state_box=sub.state_box,
                ext_input_box=sub.ext_input_box,
                int_input_box=_aux_int_box(Ga, net, i),
                name=sub.name,
            )
        )
    return AuxiliaryNetwork(aux_subsystems=aux_subs, Ga=Ga, M=M)


def _aux_int_box(Ga: np.ndarray, net: Network, i: int) -> IntervalBox:
    offs = net.state_offsets()
    rows = Ga[offs[i]:offs[i + 1], :]
    lo, hi = interval_image(rows, [s.state_box for s in net.subsystems])
    return IntervalBox(lo, hi)


def aux_noise_covariance(aux: AuxiliarySubsystem) -> np.ndarray:
    """Covariance of the aggregated noise term Rtil * vstil.

    Entries of the stacked noise vector are treated as mutually independent;
    shared draws across different auxiliary subsystems are each subsystem's
    own bookkeeping.
    """
    S = aux.Rtil * aux.noise_std[np.newaxis, :]
    return S @ S.T


def assemble_aux_noise(aux_sub: AuxiliarySubsystem, draws: dict) -> np.ndarray:
    """Stack per-(subsystem, offset) noise draws into vstil per the layout."""
    if not aux_sub.noise_layout:
        return np.zeros(0)
    return np.concatenate([np.atleast_1d(draws[key]) for key in aux_sub.noise_layout])


def oracle_simulate(net: Network, aux: AuxiliaryNetwork, x0, nu_seq=None,
                    frames: int = 3, seed: int = 0):
    """Equivalence oracle: step the interconnected original system one step
    at a time and the auxiliary network M steps at a time with the same
    noise draws; the trajectories must agree at k = j*M.

    nu_seq, when given, maps (frame j, subsystem i) to the external input
    applied at k = j*M + M - 1 (zero elsewhere by assumption).

    Returns (original trajectory, auxiliary trajectory) with shape
    (frames + 1, n_total).
    """
    M = aux.M
    rng = np.random.default_rng(seed)
    offs = net.state_offsets()
    ioffs = net.int_input_offsets()
    x = np.asarray(x0, dtype=float).reshape(net.n_total).copy()
    xa = x.copy()
    orig = [x.copy()]
    auxtraj = [xa.copy()]
    for j in range(frames):
        draws = {
            (i, t): rng.normal(size=s.noise.dim) * s.noise.std
            for i, s in enumerate(net.subsystems)
            for t in range(M)
        }
        # Original network, one step at a time.
        frame_inputs = []
        for i, s in enumerate(net.subsystems):
            if nu_seq is None:
                frame_inputs.append(np.zeros(s.m))
            else:
                frame_inputs.append(np.asarray(nu_seq(j, i), dtype=float).reshape(s.m))
        for t in range(M):
            w = net.G @ x
            nxt = np.empty_like(x)
            for i, s in enumerate(net.subsystems):
                nu = frame_inputs[i] if t == M - 1 else np.zeros(s.m)
                nxt[offs[i]:offs[i + 1]] = (
                    s.A @ x[offs[i]:offs[i + 1]]
                    + s.B @ nu
                    + s.D @ w[ioffs[i]:ioffs[i + 1]]
                    + s.R @ draws[(i, t)]
                )
            x = nxt
        # Auxiliary network, one M-step.
        wa = aux.Ga @ xa
        nxt_a = np.empty_like(xa)
        for i, asub in enumerate(aux.aux_subsystems):
            vstil = assemble_aux_noise(asub, draws)
            nxt_a[offs[i]:offs[i + 1]] = (
                asub.Atil @ xa[offs[i]:offs[i + 1]]
                + asub.B @ frame_inputs[i]
                + wa[offs[i]:offs[i + 1]]
                + asub.Rtil @ vstil
            )
        xa = nxt_a
        orig.append(x.copy())
        auxtraj.append(xa.copy())
    return np.array(orig), np.array(auxtraj)
