"""Safety synthesis on finite MDPs and Monte Carlo validation.

The internal input is treated as a rational adversary: value iteration
maximizes over external-input representatives the worst case over
internal-input representatives of the probability of staying inside the
safe set.  Policies refine to the concrete system through the interface
function, and a coupled simulation (same noise in the concrete network and
its abstraction) estimates the deviation probability that the closeness
bound controls.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .model import IntervalBox, Network
from .msample import AuxiliaryNetwork, assemble_aux_noise
from .abstraction import FiniteMDP, Partition, SINK
from .certificates import StorageCertificate

__all__ = [
    "SafetySpec",
    "Policy",
    "MCReport",
    "safety_value_iteration",
    "safe_mask",
    "refine_policy",
    "simulate_policy",
    "coupled_simulate",
    "emit_trajectories",
    "wilson_interval",
]


@dataclass(frozen=True, eq=False)
class SafetySpec:
    """Stay inside safe_box for horizon steps, asserted every stride steps."""

    safe_box: IntervalBox
    horizon: int
    stride: int = 1

    def __post_init__(self):
        if self.horizon < 0:
            raise DimensionError("horizon must be nonnegative")
        if self.stride < 1:
            raise DimensionError("stride must be >= 1")


@dataclass(eq=False)
class Policy:
    """Deterministic time-varying lookup policy on state cells.

    table[j, cell] is an external-input representative index; input_reps
    holds the representative vectors.
    """

    table: np.ndarray
    input_reps: np.ndarray

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def nu_index(self, j: int, cells: np.ndarray) -> np.ndarray:
        return self.table[j, np.asarray(cells, dtype=int)]

    def nu_value(self, j: int, cell: int) -> np.ndarray:
        return self.input_reps[int(self.table[j, int(cell)])]


@dataclass
class MCReport:
    runs: int
    seed: int
    eps: float
    horizon: int
    frequency: float
    wilson_low: float
    wilson_high: float
    halfwidth: float
    bound: float | None
    verdict: bool | None
    n_exceed: int
    history: dict | None = field(default=None, repr=False)

    def lines(self) -> list[str]:
        out = [
            f"runs: {self.runs} (seed {self.seed})",
            f"empirical exceedance frequency of sup ||x - xhat|| >= {self.eps:.6g}: "
            f"{self.frequency:.6g}",
            f"wilson 95% interval: [{self.wilson_low:.6g}, {self.wilson_high:.6g}]",
        ]
        if self.bound is not None:
            out.append(f"theoretical bound: {self.bound:.6g}")
            out.append(f"verdict (frequency <= bound + halfwidth): {self.verdict}")
        return out


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """Wilson 95% score interval for a binomial proportion."""
    if trials <= 0:
        raise DimensionError("wilson_interval needs trials > 0")
    p = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = z * np.sqrt(p * (1 - p) / trials + z2 / (4 * trials ** 2)) / denom
    return max(0.0, center - half), min(1.0, center + half), half


def safe_mask(part: Partition, safe_box: IntervalBox) -> np.ndarray:
    """Cells whose representative lies inside the safe box."""
    reps = part.reps()
    ok = np.ones(part.n_cells, dtype=bool)
    for d in range(part.dim):
        ok &= (reps[:, d] >= safe_box.lower[d]) & (reps[:, d] <= safe_box.upper[d])
    return ok


def safety_value_iteration(mdp: FiniteMDP, spec: SafetySpec):
    """Max-min dynamic programming for the invariance probability.

    V_Td is the safe-cell indicator (sink unsafe); backwards,

        V_j(x) = 1_safe(x) * max_nu min_w  sum_x' T(x'|x, nu, w) V_{j+1}(x')

    with lowest-index tie-breaks for both the maximizing input (stored in
    the policy) and the minimizing adversary.  Returns (policy, values)
    where values[j] is V_j including j = Td.
    """
    safe = safe_mask(mdp.state_part, spec.safe_box)
    n_x = mdp.n_states
    Td = spec.horizon
    values = np.zeros((Td + 1, n_x))
    values[Td] = safe.astype(float)
    table = np.zeros((max(Td, 0), n_x), dtype=int)
    for j in range(Td - 1, -1, -1):
        v_ext = np.concatenate([values[j + 1], [0.0]])  # sink worth 0
        q = mdp.T @ v_ext                     # (n_x, n_nu, n_w)
        q_min = q.min(axis=2)                 # adversary
        table[j] = np.argmax(q_min, axis=1)   # first occurrence = lowest index
        values[j] = safe * q_min.max(axis=1)
    policy = Policy(table=table, input_reps=mdp.ext_part.reps())
    return policy, values


def refine_policy(policy: Policy | None, cert: StorageCertificate,
                  state_part: Partition, M: int = 1):
    """Concrete controller (k, x, xhat) -> nu.

    At k = j*M + M - 1 the abstract input of frame j is refined through
    nu = K (x - xhat) + nuhat; every other instant returns zero (by
    contract, external inputs vanish off the input instants).
    """
    m = cert.K.shape[0]

    def controller(k: int, x, xhat) -> np.ndarray:
        if M > 0 and (k % M) != M - 1:
            return np.zeros(m)
        j = k // M
        if policy is None or policy.horizon == 0:
            nuhat = np.zeros(m)
        else:
            jj = min(j, policy.horizon - 1)
            cell = state_part.index_of(np.atleast_2d(np.asarray(xhat, dtype=float)))[0]
            if cell == SINK:
                nuhat = np.zeros(m)
            else:
                nuhat = policy.nu_value(jj, cell)
        x = np.asarray(x, dtype=float).ravel()
        xhat = np.asarray(xhat, dtype=float).ravel()
        return cert.K @ (x - xhat) + nuhat

    return controller


def simulate_policy(mdp: FiniteMDP, policy: Policy, spec: SafetySpec,
                    values: np.ndarray, x0_index: int, runs: int, seed: int,
                    adversary: str = "worst") -> float:
    """Closed-loop frequency of staying safe on the abstract MDP itself.

    The adversary picks, per visited (state, input), the internal-input
    representative minimizing the continuation value ("worst"), or a fixed
    index.  Sampling is from the kernel rows, sink included.
    """
    rng = np.random.default_rng(seed)
    safe = safe_mask(mdp.state_part, spec.safe_box)
    n_x = mdp.n_states
    state = np.full(runs, int(x0_index), dtype=int)
    alive = np.ones(runs, dtype=bool) & safe[state]
    for j in range(spec.horizon):
        if not alive.any():
            break
        v_ext = np.concatenate([values[j + 1], [0.0]])
        cells = state[alive]
        nu_idx = policy.nu_index(j, cells)
        q = mdp.T[cells, nu_idx] @ v_ext            # (n_alive, n_w)
        if adversary == "worst":
            w_idx = np.argmin(q, axis=1)
        else:
            w_idx = np.full(cells.shape, int(adversary), dtype=int)
        probs = mdp.T[cells, nu_idx, w_idx]          # (n_alive, n_x + 1)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(cells.shape[0]) * cum[:, -1]
        nxt = (cum < u[:, np.newaxis]).sum(axis=1)
        dead = (nxt >= n_x) | ~safe[np.minimum(nxt, n_x - 1)]
        idx_alive = np.flatnonzero(alive)
        state[idx_alive] = np.minimum(nxt, n_x - 1)
        alive[idx_alive[dead]] = False
    return float(alive.mean())


def coupled_simulate(net: Network, aux: AuxiliaryNetwork | None,
                     certs: list[StorageCertificate],
                     policies: list[Policy | None],
                     state_parts: list[Partition], int_parts: list[Partition],
                     eps: float, horizon: int, runs: int, seed: int,
                     x0, bound: float | None = None) -> MCReport:
    """Drive the concrete network and the abstraction with the same noise.

    The concrete network steps one step at a time under the interconnection
    w = G x, external inputs applied only at k = j*M + M - 1 through the
    interface functions evaluated at the frame-start pair (x, xhat).  The
    abstraction steps M at a time through its dynamical representation
    xhat+ = Pi_x(ftil(xhat, nuhat, Pi_w(Ga xhat), noise)), sharing the
    concrete draws.  With aux=None the abstraction is the classic one-step
    one of each original subsystem coupled through G itself (M = 1), which
    also covers nonlinear subsystems.  A run whose abstract state leaves
    the state box (sink) counts as exceeding, the conservative reading.

    Reports the empirical frequency of sup_j ||x(jM) - xhat(jM)|| >= eps
    against the theoretical bound.
    """
    if runs < 1:
        raise DimensionError("runs must be >= 1")
    M = aux.M if aux is not None else 1
    rng = np.random.default_rng(seed)
    N = len(net.subsystems)
    offs = net.state_offsets()
    ioffs = net.int_input_offsets()

    x = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (runs, 1))
    xhat = np.empty_like(x)
    dead = np.zeros(runs, dtype=bool)
    for i in range(N):
        sl = slice(offs[i], offs[i + 1])
        idx = state_parts[i].index_of(x[:, sl])
        dead |= idx == SINK
        xhat[:, sl] = state_parts[i].reps_of(np.maximum(idx, 0))

    dev = np.linalg.norm(x - xhat, axis=1)
    exceed = (dev >= eps) | dead

    hist_x = np.zeros((runs, horizon + 1, net.n_total))
    hist_xhat = np.zeros_like(hist_x)
    hist_nu = [np.zeros((runs, horizon, s.m)) for s in net.subsystems]
    hist_x[:, 0] = x
    hist_xhat[:, 0] = xhat

    for j in range(horizon):
        draws = {
            (i, t): rng.normal(size=(runs, s.noise.dim)) * s.noise.std
            for i, s in enumerate(net.subsystems)
            for t in range(M)
        }
        xf = x.copy()
        xhatf = xhat.copy()
        # abstract inputs for this frame
        nuhats = []
        for i, s in enumerate(net.subsystems):
            pol = policies[i]
            if pol is None or s.m == 0 or pol.horizon == 0:
                nuhats.append(np.zeros((runs, s.m)))
                continue
            cells = state_parts[i].index_of(xhatf[:, offs[i]:offs[i + 1]])
            jj = min(j, pol.horizon - 1)
            nu_idx = pol.nu_index(jj, np.maximum(cells, 0))
            vals = pol.input_reps[nu_idx]
            vals[cells == SINK] = 0.0
            nuhats.append(vals)
        # concrete, one step at a time
        for t in range(M):
            w = x @ net.G.T
            nxt = np.empty_like(x)
            for i, s in enumerate(net.subsystems):
                sl = slice(offs[i], offs[i + 1])
                isl = slice(ioffs[i], ioffs[i + 1])
                step = x[:, sl] @ s.A.T + w[:, isl] @ s.D.T + draws[(i, t)] @ s.R.T
                if hasattr(s, "E"):
                    step = step + (s.phi_fn()(x[:, sl] @ s.F.T)) @ s.E.T
                if t == M - 1 and s.m > 0:
                    err = xf[:, sl] - xhatf[:, sl]
                    nu = err @ certs[i].K.T + nuhats[i]
                    hist_nu[i][:, j] = nu
                    step = step + nu @ s.B.T
                nxt[:, sl] = step
            x = nxt
        # abstraction, one M-step with the shared draws
        nxt_hat = np.empty_like(xhat)
        if aux is not None:
            wa = xhat @ aux.Ga.T
            for i, asub in enumerate(aux.aux_subsystems):
                sl = slice(offs[i], offs[i + 1])
                what = int_parts[i].snap(wa[:, sl])
                vstil = _stack_noise(asub, draws, runs)
                pre = (xhatf[:, sl] @ asub.Atil.T + nuhats[i] @ asub.B.T
                       + what + vstil @ asub.Rtil.T)
                idx = state_parts[i].index_of(pre)
                dead |= idx == SINK
                nxt_hat[:, sl] = state_parts[i].reps_of(np.maximum(idx, 0))
        else:
            wa = xhat @ net.G.T
            for i, s in enumerate(net.subsystems):
                sl = slice(offs[i], offs[i + 1])
                isl = slice(ioffs[i], ioffs[i + 1])
                what = int_parts[i].snap(wa[:, isl])
                pre = (xhatf[:, sl] @ s.A.T + nuhats[i] @ s.B.T
                       + what @ s.D.T + draws[(i, 0)] @ s.R.T)
                if hasattr(s, "E"):
                    pre = pre + (s.phi_fn()(xhatf[:, sl] @ s.F.T)) @ s.E.T
                idx = state_parts[i].index_of(pre)
                dead |= idx == SINK
                nxt_hat[:, sl] = state_parts[i].reps_of(np.maximum(idx, 0))
        xhat = nxt_hat
        dev = np.linalg.norm(x - xhat, axis=1)
        exceed |= (dev >= eps) | dead
        hist_x[:, j + 1] = x
        hist_xhat[:, j + 1] = xhat

    n_exceed = int(exceed.sum())
    freq = n_exceed / runs
    lo, hi, half = wilson_interval(n_exceed, runs)
    verdict = None if bound is None else bool(freq <= bound + half)
    history = {
        "x": hist_x, "xhat": hist_xhat, "nu": hist_nu,
        "stride": M, "offsets": offs,
    }
    return MCReport(runs=runs, seed=seed, eps=eps, horizon=horizon,
                    frequency=freq, wilson_low=lo, wilson_high=hi,
                    halfwidth=half, bound=bound, verdict=verdict,
                    n_exceed=n_exceed, history=history)


def _stack_noise(asub, draws: dict, runs: int) -> np.ndarray:
    if not asub.noise_layout:
        return np.zeros((runs, 0))
    return np.concatenate([draws[key] for key in asub.noise_layout], axis=1)


def emit_trajectories(report: MCReport, path) -> int:
    """One CSV row per (run, sampling instant, subsystem): x, xhat and the
    refined input applied in that frame (blank on the final instant).

    Vector-valued states are ';'-joined inside one cell.  Returns the
    number of data rows.
    """
    hist = report.history
    if hist is None:
        rows = 0
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["run", "k", "subsystem", "x", "xhat", "nu"])
        return rows
    offs = hist["offsets"]
    M = hist["stride"]
    x, xhat, nus = hist["x"], hist["xhat"], hist["nu"]
    runs, steps, _ = x.shape
    N = len(offs) - 1

    def fmt(vec) -> str:
        return ";".join(repr(float(v)) for v in np.atleast_1d(vec))

    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "k", "subsystem", "x", "xhat", "nu"])
        for r in range(runs):
            for j in range(steps):
                for i in range(N):
                    sl = slice(offs[i], offs[i + 1])
                    nu = ""
                    if j < steps - 1 and nus[i].shape[2] > 0:
                        nu = fmt(nus[i][r, j])
                    writer.writerow([r, j * M, i, fmt(x[r, j, sl]),
                                     fmt(xhat[r, j, sl]), nu])
                    rows += 1
    return rows
