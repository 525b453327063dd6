"""Snapshot matrix assembly, SVD mode extraction, and mode truncation.

Each snapshot column stacks the h, u, v fields vertically, so the state
dimension is 3 * ny * nx.  Modes are left singular vectors of the
mean-subtracted snapshot matrix; coefficients are the projections of the
fluctuations onto the modes, A[t, i] = <Q[:, t], phi_i>.
"""

from __future__ import annotations

import io as _io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, NumericalError, StructuralError
from .swe import SnapshotSet

BASIS_MAGIC = b"RPBAS1"


@dataclass(frozen=True)
class SnapshotMatrix:
    data: np.ndarray  # [n_state, n_t] raw stacked snapshots, time-ordered
    mean: np.ndarray  # [n_state] temporal mean per row

    @property
    def n_state(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]

    @property
    def fluctuations(self) -> np.ndarray:
        """Mean-subtracted matrix Q (zero row-means)."""
        return self.data - self.mean[:, None]


@dataclass(frozen=True)
class ModalBasis:
    modes: np.ndarray      # [n_state, B] orthonormal columns
    singulars: np.ndarray  # [B] nonincreasing
    coeffs: np.ndarray     # [n_t, B]
    rank: int              # truncation count k <= B
    mean: np.ndarray       # [n_state]

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_state(self) -> int:
        return self.modes.shape[0]

    @property
    def n_t(self) -> int:
        return self.coeffs.shape[0]


def stack_state(h, u, v) -> np.ndarray:
    return np.concatenate([np.ravel(h), np.ravel(u), np.ravel(v)])


def split_state(vec: np.ndarray, ny: int, nx: int):
    cells = ny * nx
    if vec.shape[0] != 3 * cells:
        raise StructuralError("state vector length does not match the grid")
    return (
        vec[:cells].reshape(ny, nx),
        vec[cells : 2 * cells].reshape(ny, nx),
        vec[2 * cells :].reshape(ny, nx),
    )


def assemble(snapshots: SnapshotSet) -> SnapshotMatrix:
    """Stack (h, u, v) per frame into columns and record the temporal mean."""
    if snapshots.n_t < 2:
        raise DomainError("need at least 2 snapshots to assemble a matrix")
    cols = [stack_state(s.h, s.u, s.v) for s in snapshots.states]
    data = np.column_stack(cols)
    return SnapshotMatrix(data=data, mean=data.mean(axis=1))


def decompose(snap: SnapshotMatrix) -> ModalBasis:
    """Thin SVD of the fluctuation matrix with a canonical sign convention.

    The sign of each mode is fixed so its largest-magnitude entry is
    positive, making repeated decompositions byte-reproducible.
    """
    q = snap.fluctuations
    if not np.all(np.isfinite(q)):
        raise NumericalError("snapshot matrix contains non-finite entries")
    try:
        u, s, _ = np.linalg.svd(q, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD failed to converge (|Q|_max={np.abs(q).max():g}, "
            f"shape={q.shape})"
        ) from exc
    flips = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flips[flips == 0] = 1.0
    u = u * flips
    coeffs = q.T @ u
    return ModalBasis(modes=u, singulars=s, coeffs=coeffs,
                      rank=u.shape[1], mean=snap.mean.copy())


def ric(singulars: np.ndarray, n: int) -> float:
    """Relative informational content of the leading n singular values."""
    total = float(np.sum(singulars))
    if total <= 0:
        raise DomainError("degenerate data: all singular values are zero")
    if not 1 <= n <= len(singulars):
        raise DomainError(f"n={n} outside [1, {len(singulars)}]")
    return float(np.sum(singulars[:n]) / total)


def rank_for_ric(singulars: np.ndarray, threshold: float) -> int:
    """Smallest rank whose RIC reaches the threshold."""
    if not 0 < threshold <= 1:
        raise DomainError("RIC threshold must be in (0, 1]")
    cum = np.cumsum(singulars) / np.sum(singulars)
    hits = np.nonzero(cum >= threshold - 1e-15)[0]
    if len(hits) == 0:
        raise DomainError(
            f"threshold {threshold} unattainable; max RIC = {cum[-1]:.6f}"
        )
    return int(hits[0]) + 1


def truncate(basis: ModalBasis, k: int | None = None,
             ric_threshold: float | None = None) -> ModalBasis:
    """Keep the leading modes, selected by rank or by RIC threshold.

    With neither argument given, uses the rule-of-thumb default of 10% of
    the available modes.
    """
    if k is None and ric_threshold is None:
        k = max(1, int(np.ceil(0.10 * basis.n_modes)))
    elif ric_threshold is not None:
        k = rank_for_ric(basis.singulars, ric_threshold)
    if not 1 <= k <= basis.n_modes:
        raise DomainError(f"rank {k} outside [1, {basis.n_modes}]")
    return ModalBasis(
        modes=basis.modes[:, :k].copy(),
        singulars=basis.singulars[:k].copy(),
        coeffs=basis.coeffs[:, :k].copy(),
        rank=k,
        mean=basis.mean,
    )


def truncation_error(basis: ModalBasis, k: int) -> float:
    """Relative Frobenius reconstruction error of the rank-k truncation."""
    s2 = basis.singulars**2
    total = float(np.sum(s2))
    if total == 0:
        return 0.0
    return float(np.sqrt(np.sum(s2[k:]) / total))


def reconstruction_error(basis: ModalBasis, snap: SnapshotMatrix,
                         k: int | None = None) -> float:
    """Directly computed relative Frobenius residual at rank k."""
    k = basis.rank if k is None else k
    q = snap.fluctuations
    approx = basis.modes[:, :k] @ basis.coeffs[:, :k].T
    return float(np.linalg.norm(q - approx) / max(np.linalg.norm(q), 1e-300))


# ---------------------------------------------------------------------------
# Basis file format: little-endian, magic "RPBAS1",
# u32 n_state B k n_t; f64 mean, modes (column-major), S, A (row-major).
# ---------------------------------------------------------------------------

def save_basis(basis: ModalBasis, path) -> None:
    buf = _io.BytesIO()
    buf.write(BASIS_MAGIC)
    buf.write(struct.pack("<4I", basis.n_state, basis.n_modes, basis.rank,
                          basis.n_t))
    buf.write(np.ascontiguousarray(basis.mean, dtype="<f8").tobytes())
    buf.write(np.asfortranarray(basis.modes, dtype="<f8").tobytes(order="F"))
    buf.write(np.ascontiguousarray(basis.singulars, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(basis.coeffs, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_basis(path) -> ModalBasis:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(BASIS_MAGIC)] != BASIS_MAGIC:
        raise StructuralError(f"{path}: not a basis file")
    off = len(BASIS_MAGIC)
    n_state, n_modes, k, n_t = struct.unpack_from("<4I", raw, off)
    off += 16

    def read(count, shape, order="C"):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape, order=order).copy()

    mean = read(n_state, (n_state,))
    modes = read(n_state * n_modes, (n_state, n_modes), order="F")
    singulars = read(n_modes, (n_modes,))
    coeffs = read(n_t * n_modes, (n_t, n_modes))
    return ModalBasis(modes=modes, singulars=singulars, coeffs=coeffs,
                      rank=k, mean=mean)


__all__ = [
    "SnapshotMatrix", "ModalBasis", "assemble", "decompose", "ric",
    "rank_for_ric", "truncate", "truncation_error", "reconstruction_error",
    "save_basis", "load_basis", "stack_state", "split_state",
]
