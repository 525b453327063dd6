"""Galerkin projection of the shallow-water dynamics onto the POD modes.

Projecting the PDE right-hand side onto k modes yields a quadratic ODE for
the coefficient vector a(t):

    da_m/dt = C[m] + sum_i a_i L[i, m] + sum_ij a_i a_j Q[i, j, m]

The constant, linear, and quadratic tensors are built by evaluating the
physical-space integrands on the grid (same stencils as the solver, with
one-sided edges) and projecting with the discrete inner product.  The drag
term is never part of the projection.
"""

from __future__ import annotations

import hashlib
import io as _io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalError, StructuralError
from .pod import ModalBasis, split_state, stack_state
from .stencils import ddx, ddy
from .swe import Grid

OPS_MAGIC = b"RPOPS1"


@dataclass(frozen=True)
class RomOperators:
    c: np.ndarray  # [k]
    l: np.ndarray  # [k, k]
    q: np.ndarray  # [k, k, k]
    alpha_l: float = 1.0
    alpha_q: float = 1.0
    basis_checksum: bytes = b"\x00" * 32

    def __post_init__(self):
        k = self.c.shape[0]
        if self.l.shape != (k, k) or self.q.shape != (k, k, k):
            raise StructuralError("operator dimensions inconsistent with rank")
        for arr in (self.c, self.l, self.q):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("operator entries must be finite")

    @property
    def rank(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class CoeffTrajectory:
    times: np.ndarray   # [n_t]
    values: np.ndarray  # [n_t, k]
    origin: str = "gprom"  # pod | gprom | ngp | posterior-sample
    diverged: bool = False

    @property
    def rank(self) -> int:
        return self.values.shape[1]


def _fields(vec, grid):
    return split_state(vec, grid.ny, grid.nx)


def _bilinear(q1, q2, grid, mode="onesided"):
    """Negated bilinear advection term: d/dt contribution of -N(q1, q2)."""
    h1, u1, v1 = q1
    h2, u2, v2 = q2
    dx, dy = grid.dx, grid.dy
    dh = -(ddx(u1 * h2, dx, mode) + ddy(v1 * h2, dy, mode))
    du = -(u1 * ddx(u2, dx, mode) + v1 * ddy(u2, dy, mode))
    dv = -(u1 * ddx(v2, dx, mode) + v1 * ddy(v2, dy, mode))
    return dh, du, dv


def _linear_fluct(qp, grid, mode="onesided"):
    """Coriolis and gravity terms of a fluctuation (eta' = h')."""
    hp, up, vp = qp
    dh = np.zeros_like(hp)
    du = grid.f * vp - grid.g * ddx(hp, grid.dx, mode)
    dv = -grid.f * up - grid.g * ddy(hp, grid.dy, mode)
    return dh, du, dv


def _mean_forcing(qbar, grid, mode="onesided"):
    """Full right-hand side evaluated on the mean flow (eta = h + z_b)."""
    hbar, ubar, vbar = qbar
    eta = hbar + grid.z_b
    dh, du, dv = _bilinear(qbar, qbar, grid, mode)
    du = du + grid.f * vbar - grid.g * ddx(eta, grid.dx, mode)
    dv = dv - grid.f * ubar - grid.g * ddy(eta, grid.dy, mode)
    return dh, du, dv


def assemble_operators(basis: ModalBasis, grid: Grid) -> RomOperators:
    """Build C, L, Q by projecting the PDE terms onto the truncated modes.

    Per-field (h, u, v) contributions are summed into single shared-rank
    operators; the inner product is the plain dot product over the stacked
    state vector (uniform cell areas cancel against mode normalization).
    """
    k = basis.rank
    if k == 0:
        raise DomainError("basis rank must be positive")
    if basis.n_state != 3 * grid.ny * grid.nx:
        raise StructuralError("basis does not match the grid")
    phi = basis.modes[:, :k]
    mode_fields = [_fields(phi[:, i], grid) for i in range(k)]
    qbar = _fields(basis.mean, grid)

    c = phi.T @ stack_state(*_mean_forcing(qbar, grid))

    l = np.empty((k, k))
    for i in range(k):
        parts = [
            _linear_fluct(mode_fields[i], grid),
            _bilinear(qbar, mode_fields[i], grid),
            _bilinear(mode_fields[i], qbar, grid),
        ]
        total = tuple(sum(p[b] for p in parts) for b in range(3))
        l[i, :] = phi.T @ stack_state(*total)

    q = np.empty((k, k, k))
    for i in range(k):
        for j in range(k):
            q[i, j, :] = phi.T @ stack_state(
                *_bilinear(mode_fields[i], mode_fields[j], grid)
            )

    digest = hashlib.sha256(basis.modes.tobytes() + basis.mean.tobytes()).digest()
    return RomOperators(c=c, l=l, q=q, basis_checksum=digest)


def rhs(a: np.ndarray, ops: RomOperators) -> np.ndarray:
    """Quadratic ODE right-hand side at coefficient vector a."""
    qa = np.tensordot(a, ops.q, axes=(0, 0))  # [j, m]
    return ops.c + a @ ops.l + a @ qa


def prescale(ops: RomOperators, alpha_l: float = 0.05,
             alpha_q: float = 0.02) -> RomOperators:
    """Scale the linear and quadratic operators (stability remediation)."""
    if not (np.isfinite(alpha_l) and np.isfinite(alpha_q)):
        raise DomainError("prescale factors must be finite")
    return replace(ops, l=ops.l * alpha_l, q=ops.q * alpha_q,
                   alpha_l=ops.alpha_l * alpha_l,
                   alpha_q=ops.alpha_q * alpha_q)


def integrate(ops: RomOperators, a0: np.ndarray, dt: float, n_steps: int,
              t0: float = 0.0, blowup: float | None = None,
              origin: str = "gprom") -> CoeffTrajectory:
    """Classical RK4 trajectory a(t) from a0.

    Divergence (non-finite values or infinity norm beyond `blowup`) ends
    the integration early and flags the trajectory; that is a reportable
    outcome of the raw projected ROM, not an error.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    a = np.asarray(a0, dtype=float).copy()
    if a.shape != (ops.rank,):
        raise StructuralError("initial coefficient length does not match rank")
    values = [a.copy()]
    diverged = False
    for _ in range(n_steps):
        k1 = rhs(a, ops)
        k2 = rhs(a + 0.5 * dt * k1, ops)
        k3 = rhs(a + 0.5 * dt * k2, ops)
        k4 = rhs(a + dt * k3, ops)
        a = a + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = not np.all(np.isfinite(a))
        if not bad and blowup is not None:
            bad = float(np.max(np.abs(a))) > blowup
        if bad:
            diverged = True
            break
        values.append(a.copy())
    values = np.asarray(values)
    times = t0 + dt * np.arange(values.shape[0])
    return CoeffTrajectory(times=times, values=values, origin=origin,
                           diverged=diverged)


def default_blowup_bound(target: np.ndarray, factor: float = 1e3) -> float:
    """Divergence threshold relative to a reference coefficient history."""
    return factor * float(np.max(np.abs(target)))


def reconstruct(basis: ModalBasis, traj: CoeffTrajectory,
                rows: np.ndarray | None = None) -> np.ndarray:
    """Mean-added field reconstruction, optionally restricted to state rows.

    Returns [n_t, n_rows] (or [n_t, n_state] with rows=None).  For sensor
    series pass the flat h-block indices of the sensor cells.
    """
    if traj.rank > basis.rank:
        raise StructuralError("trajectory rank exceeds basis rank")
    phi = basis.modes[:, : traj.rank]
    mean = basis.mean
    if rows is not None:
        rows = np.asarray(rows)
        if rows.size and (rows.min() < 0 or rows.max() >= basis.n_state):
            raise DomainError("restriction index out of range")
        phi = phi[rows, :]
        mean = mean[rows]
    return traj.values @ phi.T + mean


# ---------------------------------------------------------------------------
# Operator file format: little-endian, magic "RPOPS1", u32 k;
# f64 C, L (row-major), Q (i-major); f64 alpha_l, alpha_q;
# 32-byte basis sha256 for provenance.
# ---------------------------------------------------------------------------

def save_operators(ops: RomOperators, path) -> None:
    with open(path, "wb") as fh:
        fh.write(operators_bytes(ops))


def operators_bytes(ops: RomOperators) -> bytes:
    buf = _io.BytesIO()
    buf.write(OPS_MAGIC)
    buf.write(struct.pack("<I", ops.rank))
    for arr in (ops.c, ops.l, ops.q):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(struct.pack("<2d", ops.alpha_l, ops.alpha_q))
    buf.write(ops.basis_checksum)
    return buf.getvalue()


def load_operators(path):
    """Returns (ops, trailing_bytes); trailing bytes may hold a correction
    section appended by the operator-tuning stage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    ops, off = _parse_operators(raw, path)
    return ops, raw[off:]


def _parse_operators(raw: bytes, path):
    if raw[: len(OPS_MAGIC)] != OPS_MAGIC:
        raise StructuralError(f"{path}: not an operator file")
    off = len(OPS_MAGIC)
    (k,) = struct.unpack_from("<I", raw, off)
    off += 4

    def read(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape).copy()

    c = read(k, (k,))
    l = read(k * k, (k, k))
    q = read(k * k * k, (k, k, k))
    alpha_l, alpha_q = struct.unpack_from("<2d", raw, off)
    off += 16
    checksum = raw[off : off + 32]
    off += 32
    ops = RomOperators(c=c, l=l, q=q, alpha_l=alpha_l, alpha_q=alpha_q,
                       basis_checksum=checksum)
    return ops, off


__all__ = [
    "RomOperators", "CoeffTrajectory", "assemble_operators", "rhs",
    "prescale", "integrate", "reconstruct", "default_blowup_bound",
    "save_operators", "load_operators", "operators_bytes",
]
