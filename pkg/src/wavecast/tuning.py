"""Stabilizing the projected ROM by training elementwise operator corrections.

The linear and quadratic tensors are multiplied entrywise by free
correction factors (initialized to ones, so the untrained model reproduces
the base ROM bitwise).  The factors are optimized through the RK4 solve
against the POD coefficient trajectory with a mean-square error loss plus
a stability penalty on an extended integration horizon.  Gradients come
from a discrete adjoint of the RK4 scheme.
"""

from __future__ import annotations

import io as _io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalError, StructuralError
from .galerkin import (CoeffTrajectory, RomOperators, integrate,
                       operators_bytes, _parse_operators)

MODEL_MAGIC = b"RPNGP1"


@dataclass(frozen=True)
class CorrectionParams:
    l_fac: np.ndarray  # [k, k] multipliers on L
    q_fac: np.ndarray  # [k, k, k] multipliers on Q
    lam: float = 1e-2
    horizon_factor: float = 2.0

    @staticmethod
    def identity(k: int, lam: float = 1e-2,
                 horizon_factor: float = 2.0) -> "CorrectionParams":
        return CorrectionParams(l_fac=np.ones((k, k)),
                                q_fac=np.ones((k, k, k)),
                                lam=lam, horizon_factor=horizon_factor)


@dataclass(frozen=True)
class TrainSettings:
    iters: int = 2500
    lr: float = 0.2
    loss_tol: float = 1e-12
    lam: float = 1e-2
    horizon_factor: float = 2.0
    rho: float = 2.0           # stability bound multiplier on max ||target||
    lr_decay: float = 0.5      # applied when a step produces non-finite loss
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainingRecord:
    loss_history: np.ndarray
    initial_loss: float
    best_loss: float
    best_iter: int
    final_mse: float
    final_penalty: float
    grad_norm: float
    failed: bool = False


@dataclass(frozen=True)
class TunedRom:
    base: RomOperators  # prescaled projection operators
    params: CorrectionParams
    record: TrainingRecord | None = None

    @property
    def rank(self) -> int:
        return self.base.rank

    def effective(self) -> RomOperators:
        return replace(self.base,
                       l=self.base.l * self.params.l_fac,
                       q=self.base.q * self.params.q_fac)


def forward(model: TunedRom, a0: np.ndarray, dt: float, n_steps: int,
            blowup: float | None = None) -> CoeffTrajectory:
    """RK4 trajectory under the corrected operators."""
    return integrate(model.effective(), a0, dt, n_steps,
                     blowup=blowup, origin="ngp")


def _stability_bound(target: np.ndarray, rho: float) -> float:
    return rho * float(np.max(np.linalg.norm(target, axis=1)))


def loss_parts(traj_values: np.ndarray, target: np.ndarray, lam: float,
               rho: float) -> tuple[float, float, float]:
    """(total, mse, penalty) over the training window and extended tail."""
    n_t = target.shape[0]
    if traj_values.shape[0] < n_t:
        return np.inf, np.inf, np.inf
    mse = float(np.mean((traj_values[:n_t] - target) ** 2))
    tail = traj_values[n_t:]
    if tail.shape[0] == 0:
        penalty = 0.0
    else:
        bound = _stability_bound(target, rho)
        excess = np.maximum(0.0, np.linalg.norm(tail, axis=1) - bound)
        penalty = float(np.mean(excess**2))
    return mse + lam * penalty, mse, penalty


def _rk4_forward_stages(ops: RomOperators, a0, dt, n_steps):
    """Integrate while keeping the per-step stage states for the adjoint."""
    from .galerkin import rhs

    a = np.asarray(a0, dtype=float).copy()
    states = [a.copy()]
    stages = []
    for _ in range(n_steps):
        x1 = a
        k1 = rhs(x1, ops)
        x2 = x1 + 0.5 * dt * k1
        k2 = rhs(x2, ops)
        x3 = x1 + 0.5 * dt * k2
        k3 = rhs(x3, ops)
        x4 = x1 + dt * k3
        k4 = rhs(x4, ops)
        a = x1 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(a)):
            return np.asarray(states), stages, False
        states.append(a.copy())
        stages.append((x1, x2, x3, x4))
    return np.asarray(states), stages, True


def loss_and_gradient(base: RomOperators, params: CorrectionParams,
                      a0: np.ndarray, target: np.ndarray, dt: float,
                      rho: float = 2.0):
    """Loss and its gradient w.r.t. every correction factor.

    Returns (loss, grad_l, grad_q, (mse, penalty)).  A trajectory that
    leaves the finite range yields an infinite loss and no gradient.
    """
    k = base.rank
    n_t = target.shape[0]
    n_steps = int(round(params.horizon_factor * (n_t - 1)))
    eff = replace(base, l=base.l * params.l_fac, q=base.q * params.q_fac)
    states, stages, ok = _rk4_forward_stages(eff, a0, dt, n_steps)
    if not ok or states.shape[0] <= n_t - 1:
        return np.inf, None, None, (np.inf, np.inf)
    loss, mse, penalty = loss_parts(states, target, params.lam, rho)
    if not np.isfinite(loss):
        return np.inf, None, None, (mse, penalty)

    # direct dLoss/da_t for every stored state
    dstates = np.zeros_like(states)
    dstates[:n_t] = 2.0 * (states[:n_t] - target) / (n_t * k)
    tail = states[n_t:]
    if tail.shape[0]:
        bound = _stability_bound(target, rho)
        norms = np.linalg.norm(tail, axis=1)
        excess = np.maximum(0.0, norms - bound)
        active = excess > 0
        if active.any():
            scale = params.lam * 2.0 * excess[active] / (
                np.maximum(norms[active], 1e-300) * tail.shape[0])
            dstates[n_t:][active] = scale[:, None] * tail[active]

    grad_l = np.zeros_like(base.l)
    grad_q = np.zeros_like(base.q)
    lam_adj = dstates[n_steps].copy()

    def jac_t_vec(x, kbar):
        m = np.tensordot(eff.q, kbar, axes=(2, 0))  # [i, j]
        return eff.l @ kbar + m @ x + m.T @ x

    def accumulate(x, kbar):
        nonlocal grad_l, grad_q
        grad_l += np.outer(x, kbar) * base.l
        grad_q += np.einsum("i,j,m->ijm", x, x, kbar) * base.q

    for s in range(n_steps - 1, -1, -1):
        x1, x2, x3, x4 = stages[s]
        kbar4 = (dt / 6.0) * lam_adj
        xbar4 = jac_t_vec(x4, kbar4)
        accumulate(x4, kbar4)
        kbar3 = (dt / 3.0) * lam_adj + dt * xbar4
        xbar3 = jac_t_vec(x3, kbar3)
        accumulate(x3, kbar3)
        kbar2 = (dt / 3.0) * lam_adj + 0.5 * dt * xbar3
        xbar2 = jac_t_vec(x2, kbar2)
        accumulate(x2, kbar2)
        kbar1 = (dt / 6.0) * lam_adj + 0.5 * dt * xbar2
        xbar1 = jac_t_vec(x1, kbar1)
        accumulate(x1, kbar1)
        lam_adj = lam_adj + xbar1 + xbar2 + xbar3 + xbar4 + dstates[s]

    return loss, grad_l, grad_q, (mse, penalty)


def train(ops: RomOperators, target: CoeffTrajectory,
          settings: TrainSettings = TrainSettings()) -> TunedRom:
    """Adam optimization of the correction factors from the identity init.

    Best-so-far parameters are returned; a step that drives the loss
    non-finite is rejected (revert to best, decay the step size).
    """
    k = ops.rank
    if target.rank != k:
        raise StructuralError("target trajectory rank does not match operators")
    tvals = target.values
    a0 = tvals[0]
    dt = float(target.times[1] - target.times[0])
    params = CorrectionParams.identity(k, lam=settings.lam,
                                       horizon_factor=settings.horizon_factor)

    theta = np.concatenate([params.l_fac.ravel(), params.q_fac.ravel()])
    n_l = k * k
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr = settings.lr
    history = []
    best_theta = theta.copy()
    best_loss = np.inf
    best_iter = -1
    init_loss = None
    grad_norm = np.nan
    parts = (np.nan, np.nan)

    for it in range(settings.iters):
        cur = replace(params, l_fac=theta[:n_l].reshape(k, k),
                      q_fac=theta[n_l:].reshape(k, k, k))
        loss, gl, gq, parts = loss_and_gradient(ops, cur, a0, tvals, dt,
                                                rho=settings.rho)
        if init_loss is None:
            init_loss = loss
        history.append(loss)
        if not np.isfinite(loss):
            theta = best_theta.copy()
            m[:] = 0.0
            v[:] = 0.0
            lr *= settings.lr_decay
            continue
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
            best_iter = it
        if loss < settings.loss_tol:
            break
        grad = np.concatenate([gl.ravel(), gq.ravel()])
        grad_norm = float(np.linalg.norm(grad))
        m = settings.beta1 * m + (1.0 - settings.beta1) * grad
        v = settings.beta2 * v + (1.0 - settings.beta2) * grad**2
        mhat = m / (1.0 - settings.beta1 ** (it + 1))
        vhat = v / (1.0 - settings.beta2 ** (it + 1))
        theta = theta - lr * mhat / (np.sqrt(vhat) + settings.eps)

    failed = (init_loss is not None and np.isfinite(init_loss)
              and best_loss >= init_loss and settings.iters > 1)
    final = replace(params, l_fac=best_theta[:n_l].reshape(k, k),
                    q_fac=best_theta[n_l:].reshape(k, k, k))
    fin_loss, fin_mse, fin_pen = _final_parts(ops, final, a0, tvals, dt,
                                              settings.rho)
    record = TrainingRecord(
        loss_history=np.asarray(history), initial_loss=float(init_loss),
        best_loss=float(best_loss), best_iter=best_iter,
        final_mse=fin_mse, final_penalty=fin_pen,
        grad_norm=grad_norm, failed=failed,
    )
    return TunedRom(base=ops, params=final, record=record)


def _final_parts(ops, params, a0, target, dt, rho):
    n_t = target.shape[0]
    n_steps = int(round(params.horizon_factor * (n_t - 1)))
    eff = replace(ops, l=ops.l * params.l_fac, q=ops.q * params.q_fac)
    traj = integrate(eff, a0, dt, n_steps)
    return loss_parts(traj.values, target, params.lam, rho)


# ---------------------------------------------------------------------------
# Model file: operator bytes, then "RPNGP1", u32 k, u32 n_iter,
# f64 lam, horizon_factor, final_mse; then l_fac, q_fac.
# ---------------------------------------------------------------------------

def save_model(model: TunedRom, path) -> None:
    buf = _io.BytesIO()
    buf.write(operators_bytes(model.base))
    buf.write(MODEL_MAGIC)
    k = model.rank
    n_iter = len(model.record.loss_history) if model.record else 0
    mse = model.record.final_mse if model.record else np.nan
    buf.write(struct.pack("<2I", k, n_iter))
    buf.write(struct.pack("<3d", model.params.lam,
                          model.params.horizon_factor, mse))
    buf.write(np.ascontiguousarray(model.params.l_fac, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.params.q_fac, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> TunedRom:
    with open(path, "rb") as fh:
        raw = fh.read()
    base, off = _parse_operators(raw, path)
    if raw[off : off + len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise StructuralError(f"{path}: missing correction section")
    off += len(MODEL_MAGIC)
    k, n_iter = struct.unpack_from("<2I", raw, off)
    off += 8
    lam, horizon_factor, mse = struct.unpack_from("<3d", raw, off)
    off += 24
    if k != base.rank:
        raise StructuralError(f"{path}: correction rank mismatch")

    def read(count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape).copy()

    l_fac = read(k * k, (k, k))
    q_fac = read(k**3, (k, k, k))
    params = CorrectionParams(l_fac=l_fac, q_fac=q_fac, lam=lam,
                              horizon_factor=horizon_factor)
    record = TrainingRecord(loss_history=np.full(n_iter, np.nan),
                            initial_loss=np.nan, best_loss=np.nan,
                            best_iter=-1, final_mse=mse,
                            final_penalty=np.nan, grad_norm=np.nan)
    return TunedRom(base=base, params=params, record=record)


__all__ = [
    "CorrectionParams", "TrainSettings", "TrainingRecord", "TunedRom",
    "forward", "loss_parts", "loss_and_gradient", "train",
    "save_model", "load_model",
]
