"""Finite-MDP abstraction: uniform partitions, representative-point maps,
exact Gaussian kernel integration, the dense-tensor memory model, and a
checksummed binary file format.

The kernel rows are probabilities of landing in each state cell from one
(state, external input, internal input) representative triple; mass leaving
the state box is routed to an absorbing sink state appended as the last
column (leaving the box is certain failure for safety synthesis, the
conservative choice).
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import (
    DegenerateNoiseError,
    DimensionError,
    FileFormatError,
    MemoryBudgetError,
)
from .model import IntervalBox, LinearSubsystem, NonlinearSubsystem
from .msample import AuxiliarySubsystem, aux_noise_covariance

__all__ = [
    "Partition",
    "FiniteMDP",
    "build_partition",
    "pi_map",
    "build_mdp",
    "memory_estimate",
    "save_mdp",
    "load_mdp",
    "SINK",
]

SINK = -1

_MAGIC = b"CMPMDP01"
_VERSION = 1
_DEFAULT_BUDGET = 4 * 10 ** 9  # bytes


@dataclass(frozen=True, eq=False)
class Partition:
    """Uniform grid over a box with cell centers as representatives.

    delta is the Euclidean diagonal of one cell, the sup of ||x - x'|| over
    a cell, so representatives satisfy ||Pi(x) - x|| <= delta / 2.
    """

    box: IntervalBox
    cells_per_dim: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells_per_dim", tuple(int(c) for c in self.cells_per_dim))
        if len(self.cells_per_dim) != self.box.dim:
            raise DimensionError("cells_per_dim length != box dim")
        for c, w in zip(self.cells_per_dim, self.box.widths):
            if c < 1:
                raise DimensionError("cells_per_dim entries must be >= 1")
            if w == 0.0 and c > 1:
                raise DimensionError("zero-width dimension cannot have > 1 cell")

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def n_cells(self) -> int:
        out = 1
        for c in self.cells_per_dim:
            out *= c
        return out

    @property
    def widths(self) -> np.ndarray:
        return self.box.widths / np.maximum(np.array(self.cells_per_dim, dtype=float), 1)

    @property
    def delta(self) -> float:
        return float(np.linalg.norm(self.widths))

    def edges(self, d: int) -> np.ndarray:
        """Cell edges along dimension d, length cells_per_dim[d] + 1."""
        return self.box.lower[d] + self.widths[d] * np.arange(self.cells_per_dim[d] + 1)

    def reps(self) -> np.ndarray:
        """All representatives, shape (n_cells, dim), C-order enumeration."""
        if self.dim == 0:
            return np.zeros((1, 0))
        axes = [
            self.box.lower[d] + (np.arange(self.cells_per_dim[d]) + 0.5) * self.widths[d]
            for d in range(self.dim)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def rep_of(self, index: int) -> np.ndarray:
        if self.dim == 0:
            return np.zeros(0)
        multi = np.unravel_index(int(index), self.cells_per_dim)
        return self.box.lower + (np.asarray(multi, dtype=float) + 0.5) * self.widths

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """Cell indices of points (shape (N, dim)); SINK when outside.

        Points exactly on an interior cell boundary resolve to the
        lower-index cell; the upper box face belongs to the last cell.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.dim == 0:
            return np.zeros(pts.shape[0], dtype=int)
        idx = np.zeros(pts.shape[0], dtype=int)
        outside = np.zeros(pts.shape[0], dtype=bool)
        stride = 1
        for d in range(self.dim - 1, -1, -1):
            x = pts[:, d]
            lo, hi = self.box.lower[d], self.box.upper[d]
            c = self.cells_per_dim[d]
            w = self.widths[d]
            outside |= (x < lo) | (x > hi)
            if w == 0.0:
                k = np.zeros_like(idx)
            else:
                k = np.floor((x - lo) / w).astype(int)
                k = np.minimum(k, c - 1)
                # exact interior boundary -> lower cell
                on_edge = (k >= 1) & (x == lo + k * w)
                k[on_edge] -= 1
                k = np.maximum(k, 0)
            idx += k * stride
            stride *= c
        idx[outside] = SINK
        return idx

    def reps_of(self, indices: np.ndarray) -> np.ndarray:
        """Representatives for an index array, shape (N, dim)."""
        indices = np.asarray(indices, dtype=int)
        if self.dim == 0:
            return np.zeros((indices.size, 0))
        multi = np.stack(np.unravel_index(indices, self.cells_per_dim), axis=-1)
        return self.box.lower + (multi + 0.5) * self.widths

    def snap(self, points: np.ndarray) -> np.ndarray:
        """Representatives of the cells containing points, clipping onto the
        box first (for maps whose exact image lies inside the box)."""
        orig_shape = np.asarray(points, dtype=float).shape
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        clipped = np.clip(pts, self.box.lower, self.box.upper)
        return self.reps_of(self.index_of(clipped)).reshape(orig_shape)


def build_partition(box: IntervalBox, target_delta: float | None = None,
                    cells_per_dim=None) -> Partition:
    """Uniform partition from explicit cell counts or a target diameter.

    With a target, per-dimension counts are the smallest making the cell
    diagonal <= target_delta.
    """
    if cells_per_dim is not None:
        return Partition(box=box, cells_per_dim=tuple(cells_per_dim))
    if target_delta is None or target_delta <= 0:
        raise DimensionError("need either cells_per_dim or a positive target_delta")
    if box.dim == 0:
        return Partition(box=box, cells_per_dim=())
    per_dim = target_delta / np.sqrt(box.dim)
    counts = []
    for w in box.widths:
        if w == 0.0:
            counts.append(1)
        else:
            counts.append(int(np.ceil(w / per_dim - 1e-12)))
    return Partition(box=box, cells_per_dim=tuple(counts))


def pi_map(part: Partition, x) -> tuple[int, np.ndarray | None]:
    """Cell index and representative of x; (SINK, None) outside the box."""
    idx = int(part.index_of(np.asarray(x, dtype=float).reshape(1, -1))[0])
    if idx == SINK:
        return SINK, None
    return idx, part.rep_of(idx)


@dataclass(eq=False)
class FiniteMDP:
    """Dense finite MDP with sink column.

    T has shape (n_x, n_nu, n_w, n_x + 1); the last column is the sink.
    """

    state_part: Partition
    ext_part: Partition
    int_part: Partition
    T: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.state_part.n_cells

    @property
    def sink_index(self) -> int:
        return self.n_states

    def row_sums(self) -> np.ndarray:
        return self.T.sum(axis=-1)


def _mean_parts(model):
    """(A_eff, B, D_eff, phi_term, covariance) of the abstracted dynamics."""
    if isinstance(model, AuxiliarySubsystem):
        cov = aux_noise_covariance(model)
        return model.Atil, model.B, model.Dtil, None, cov
    if isinstance(model, NonlinearSubsystem):
        cov = (model.R * model.noise.std[np.newaxis, :]) @ (
            model.R * model.noise.std[np.newaxis, :]
        ).T
        phi = model.phi_fn()
        def phi_term(x):
            return (model.E @ phi(model.F @ x)).reshape(model.n)
        return model.A, model.B, model.D, phi_term, cov
    if isinstance(model, LinearSubsystem):
        S = model.R * model.noise.std[np.newaxis, :]
        return model.A, model.B, model.D, None, S @ S.T
    raise DimensionError(f"cannot abstract model type {type(model).__name__}")


def memory_estimate(n_x: int, n_nu: int, n_w: int, bytes_per_entry: int = 8) -> dict:
    """Dense-kernel memory model.

    Per subsystem the kernel is an (n_x * n_w * n_nu) x n_x matrix.  The
    monolithic variant for N identical subsystems multiplies the per-axis
    counts instead.  Integer arithmetic is exact (Python ints), no overflow.
    """
    n_x, n_nu, n_w = int(n_x), int(n_nu), int(n_w)
    if min(n_x, n_nu, n_w) < 1:
        raise DimensionError("memory_estimate needs positive counts")
    by = n_x * n_w * n_nu * n_x * int(bytes_per_entry)
    return {"bytes": by, "gb": by / 1e9}


def memory_estimate_monolithic(n_x_list, n_nu_list, bytes_per_entry: int = 8) -> dict:
    """Memory for one kernel over the product state/input spaces."""
    nx = 1
    for v in n_x_list:
        nx *= int(v)
    nu = 1
    for v in n_nu_list:
        nu *= int(v)
    by = nx * nu * nx * int(bytes_per_entry)
    return {"bytes": by, "gb": by / 1e9}


def _axis_masses(edges: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """P(cell interval) per mean: shape (len(means), len(edges) - 1)."""
    z = (edges[np.newaxis, :] - means[:, np.newaxis]) / sigma
    cdf = ndtr(z)
    return np.diff(cdf, axis=1)


def build_mdp(model, state_part: Partition, ext_part: Partition, int_part: Partition,
              threads: int = 1, budget_bytes: int = _DEFAULT_BUDGET,
              memmap_path=None, provenance: dict | None = None) -> FiniteMDP:
    """Integrate the Gaussian transition kernel into a dense tensor.

    For axis-aligned (diagonal) covariance each row is an exact product of
    per-axis normal-CDF differences; otherwise the box probabilities are
    integrated through the multivariate normal CDF (numerical, relative
    accuracy about 1e-6).  Rows are independent, so construction may be
    threaded; the result does not depend on the thread count.

    Refuses with the memory estimate when the dense tensor would exceed
    budget_bytes, unless memmap_path points the tensor at a disk-backed
    file.
    """
    A, B, Dw, phi_term, cov = _mean_parts(model)
    n = A.shape[0]
    if state_part.dim != n:
        raise DimensionError("state partition dim != model state dim")
    if ext_part.dim != B.shape[1]:
        raise DimensionError("external-input partition dim != cols(B)")
    if int_part.dim != Dw.shape[1]:
        raise DimensionError("internal-input partition dim != cols(D)")
    n_x, n_nu, n_w = state_part.n_cells, ext_part.n_cells, int_part.n_cells

    required = n_x * n_nu * n_w * (n_x + 1) * 8
    if memmap_path is None and required > budget_bytes:
        raise MemoryBudgetError(required, budget_bytes)
    shape = (n_x, n_nu, n_w, n_x + 1)
    if memmap_path is not None:
        T = np.lib.format.open_memmap(str(memmap_path), mode="w+",
                                      dtype=np.float64, shape=shape)
    else:
        T = np.empty(shape, dtype=np.float64)

    var = np.diag(cov).copy()
    offdiag = cov - np.diag(var)
    diagonal = not np.any(np.abs(offdiag) > 1e-12 * max(1.0, float(np.abs(cov).max())))
    widths = state_part.box.widths
    if np.any((np.sqrt(var) == 0.0) & (widths > 0)):
        raise DegenerateNoiseError(
            "noise covariance singular along a partitioned state dimension"
        )

    x_reps = state_part.reps()
    nu_reps = ext_part.reps()
    w_reps = int_part.reps()
    base_nu = nu_reps @ B.T                      # (n_nu, n)
    base_w = w_reps @ Dw.T                       # (n_w, n)
    ax = x_reps @ A.T                            # (n_x, n)
    if phi_term is not None:
        ax = ax + np.stack([phi_term(x) for x in x_reps])
    edges = [state_part.edges(d) for d in range(n)]
    sig = np.sqrt(var)

    def fill_state(ix):
        for inu in range(n_nu):
            means = ax[ix] + base_nu[inu] + base_w   # (n_w, n)
            if diagonal:
                block = _axis_masses(edges[0], means[:, 0], sig[0])
                for d in range(1, n):
                    md = _axis_masses(edges[d], means[:, d], sig[d])
                    block = np.einsum("wi,wj->wij", block.reshape(len(means), -1), md)
                    block = block.reshape(len(means), -1)
                inside = block.reshape(n_w, n_x)
            else:
                inside = _dense_rows_mvn(means, cov, state_part)
            T[ix, inu, :, :n_x] = inside
            T[ix, inu, :, n_x] = 1.0 - inside.sum(axis=1)

    threads = max(1, int(threads))
    if threads == 1 or n_x == 1:
        for ix in range(n_x):
            fill_state(ix)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_state, range(n_x)))

    if isinstance(T, np.memmap):
        T.flush()
    prov = dict(provenance or {})
    prov.setdefault("delta", state_part.delta)
    prov.setdefault("beta", int_part.delta)
    prov.setdefault("theta", ext_part.delta)
    return FiniteMDP(state_part=state_part, ext_part=ext_part, int_part=int_part,
                     T=T, provenance=prov)


def _dense_rows_mvn(means: np.ndarray, cov: np.ndarray, part: Partition) -> np.ndarray:
    """Cell probabilities via the multivariate normal rectangle integral."""
    from scipy.stats import multivariate_normal

    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateNoiseError("noise covariance not positive definite") from exc
    reps = part.reps()
    half = part.widths / 2.0
    out = np.empty((means.shape[0], part.n_cells))
    for r, m in enumerate(means):
        mvn = multivariate_normal(mean=m, cov=cov, allow_singular=False)
        for c, center in enumerate(reps):
            out[r, c] = mvn.cdf(center + half, lower_limit=center - half)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# binary file format: magic, version, JSON header, float64 tensor, checksum
# ---------------------------------------------------------------------------

def _checksum(update_chunks) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for chunk in update_chunks:
        h.update(chunk)
    return h.digest()


def _box_meta(box: IntervalBox) -> dict:
    return {"lower": box.lower.tolist(), "upper": box.upper.tolist()}


def _part_meta(part: Partition) -> dict:
    return {"box": _box_meta(part.box), "cells_per_dim": list(part.cells_per_dim)}


def _part_from_meta(meta: dict) -> Partition:
    box = IntervalBox(np.array(meta["box"]["lower"]), np.array(meta["box"]["upper"]))
    return Partition(box=box, cells_per_dim=tuple(meta["cells_per_dim"]))


def save_mdp(mdp: FiniteMDP, path) -> None:
    """Write the MDP to the binary format (bit-exact round trip)."""
    header = json.dumps({
        "shape": list(mdp.T.shape),
        "state": _part_meta(mdp.state_part),
        "ext": _part_meta(mdp.ext_part),
        "int": _part_meta(mdp.int_part),
        "provenance": mdp.provenance,
    }, sort_keys=True).encode("utf-8")
    h = hashlib.blake2b(digest_size=8)
    with open(path, "wb") as fh:
        for chunk in (_MAGIC, struct.pack("<I", _VERSION),
                      struct.pack("<Q", len(header)), header):
            fh.write(chunk)
            h.update(chunk)
        flat = mdp.T.reshape(-1)
        step = 1 << 20
        for start in range(0, flat.size, step):
            piece = np.ascontiguousarray(flat[start:start + step], dtype="<f8").tobytes()
            fh.write(piece)
            h.update(piece)
        fh.write(h.digest())


def load_mdp(path, memmap: bool = False) -> FiniteMDP:
    """Read an MDP file, verifying magic, version and trailing checksum."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FileFormatError(f"bad magic bytes {magic!r}")
        h.update(magic)
        raw = fh.read(4)
        if len(raw) < 4:
            raise FileFormatError("truncated header")
        (version,) = struct.unpack("<I", raw)
        if version != _VERSION:
            raise FileFormatError(f"unsupported format version {version}")
        h.update(raw)
        raw = fh.read(8)
        (hlen,) = struct.unpack("<Q", raw)
        h.update(raw)
        header = fh.read(hlen)
        if len(header) < hlen:
            raise FileFormatError("truncated header")
        h.update(header)
        meta = json.loads(header.decode("utf-8"))
        shape = tuple(meta["shape"])
        count = 1
        for s in shape:
            count *= s
        offset = fh.tell()
        remaining = count * 8
        pieces = [] if not memmap else None
        step = 1 << 24
        while remaining:
            chunk = fh.read(min(step, remaining))
            if not chunk:
                raise FileFormatError("truncated tensor data")
            h.update(chunk)
            remaining -= len(chunk)
            if pieces is not None:
                pieces.append(chunk)
        stored = fh.read(8)
        if len(stored) < 8 or fh.read(1) != b"":
            raise FileFormatError("truncated or oversized file")
        if stored != h.digest():
            raise FileFormatError("checksum mismatch")
    if memmap:
        T = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=shape)
    else:
        T = np.frombuffer(b"".join(pieces), dtype="<f8").reshape(shape).copy()
    return FiniteMDP(
        state_part=_part_from_meta(meta["state"]),
        ext_part=_part_from_meta(meta["ext"]),
        int_part=_part_from_meta(meta["int"]),
        T=T,
        provenance=meta.get("provenance", {}),
    )
