"""Euler-Lagrange forward dynamics and fixed-step integrators.

Functions accept numpy arrays or torch tensors with arbitrary leading batch
dimensions.  If any input is a tensor the torch path is used (and results
stay differentiable); otherwise everything runs in numpy, which is much
cheaper for the small arrays of reference simulations.  A phase state is a flat vector of length ``2m`` whose first
``m`` entries are the generalized coordinates ``q`` and whose last ``m``
entries are the generalized velocities ``qdot``.  The inertia derivative
tensor is laid out as ``dD_dq[..., i, j, k] = dD[i, j] / dq[k]``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

Array = np.ndarray | torch.Tensor
Dynamics = Callable[[Array], Array]

INTEGRATORS = ("euler", "rk4")


class InertiaFactorizationError(ValueError):
    """Raised when an inertia matrix is not symmetric positive definite."""

    def __init__(self, matrix: Array, index: tuple[int, ...]):
        self.matrix = matrix
        self.index = index
        super().__init__(
            f"inertia matrix D at batch index {index} is not positive definite; "
            f"Cholesky failed on D = {np.asarray(matrix).tolist()}"
        )


class RolloutDivergedError(FloatingPointError):
    """Raised when a rollout produces a non-finite state."""

    def __init__(self, step: int, batch_index: tuple[int, ...] | None = None):
        self.step = step
        self.batch_index = batch_index
        where = "" if batch_index is None else f" (batch index {batch_index})"
        super().__init__(f"rollout diverged at step {step}{where}: non-finite state")


def _use_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _coerce(*xs):
    """Convert every input to the common backend."""
    if _use_torch(*xs):
        ref = next(x for x in xs if isinstance(x, torch.Tensor))
        return tuple(
            x if isinstance(x, torch.Tensor) or x is None else torch.as_tensor(x, dtype=ref.dtype)
            for x in xs
        )
    return tuple(None if x is None else np.asarray(x, dtype=np.float64) for x in xs)


def _einsum(spec: str, *xs):
    return torch.einsum(spec, *xs) if _use_torch(*xs) else np.einsum(spec, *xs)


def split_state(z: Array) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a ``(..., 2m)`` phase state into ``(q, qdot)``."""
    if z.shape[-1] % 2:
        raise ValueError(f"phase state must have even length, got {z.shape[-1]}")
    m = z.shape[-1] // 2
    return z[..., :m], z[..., m:]


def join_state(q: Array, qdot: Array) -> Array:
    if q.shape != qdot.shape:
        raise ValueError(f"q and qdot shapes differ: {tuple(q.shape)} vs {tuple(qdot.shape)}")
    if _use_torch(q, qdot):
        return torch.cat([q, qdot], dim=-1)
    return np.concatenate([q, qdot], axis=-1)


def _check_square(D: Array, m: int, name: str = "D") -> None:
    if D.shape[-2:] != (m, m):
        raise ValueError(f"{name} must be {m}x{m}, got trailing shape {tuple(D.shape[-2:])}")


def kinetic_energy(D, qdot) -> Array:
    """Return ``0.5 * qdot^T D qdot``."""
    D, qdot = _coerce(D, qdot)
    _check_square(D, qdot.shape[-1])
    return 0.5 * _einsum("...i,...ij,...j->...", qdot, D, qdot)


def lagrangian(T, V) -> Array:
    T, V = _coerce(T, V)
    return T - V


def coriolis_vector(dD_dq, qdot) -> Array:
    """Coriolis/centrifugal vector ``C_k = sum_ij c_ijk qdot_i qdot_j``.

    The Christoffel-type coefficients are
    ``c_ijk = dD[k, j]/dq[i] - 0.5 * dD[i, j]/dq[k]``.
    """
    dD_dq, qdot = _coerce(dD_dq, qdot)
    m = qdot.shape[-1]
    if dD_dq.shape[-3:] != (m, m, m):
        raise ValueError(
            f"inertia derivative must be {m}x{m}x{m}, got {tuple(dD_dq.shape[-3:])}"
        )
    # dD_dq[k, j, i] = dD[k, j]/dq[i]
    first = _einsum("...kji,...i,...j->...k", dD_dq, qdot, qdot)
    second = _einsum("...ijk,...i,...j->...k", dD_dq, qdot, qdot)
    return first - 0.5 * second


def _cholesky_np(D: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        flat = D.reshape(-1, *D.shape[-2:])
        for i, Di in enumerate(flat):
            try:
                np.linalg.cholesky(Di)
            except np.linalg.LinAlgError:
                index = tuple(int(k) for k in np.unravel_index(i, D.shape[:-2]))
                raise InertiaFactorizationError(Di, index) from None
        raise


def _cho_solve_np(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L L^T x = b`` by forward then backward substitution."""
    m = b.shape[-1]
    L = np.broadcast_to(L, b.shape[:-1] + (m, m))
    y = np.empty_like(b)
    for i in range(m):
        y[..., i] = (b[..., i] - np.einsum("...j,...j->...", L[..., i, :i], y[..., :i])) / L[..., i, i]
    x = np.empty_like(b)
    for i in reversed(range(m)):
        x[..., i] = (
            y[..., i] - np.einsum("...j,...j->...", L[..., i + 1 :, i], x[..., i + 1 :])
        ) / L[..., i, i]
    return x


def forward_dynamics(D, C, g, tau=None) -> Array:
    """Solve ``D qddot = -(C + g - tau)`` by Cholesky factorization."""
    D, C, g, tau = _coerce(D, C, g, tau)
    m = C.shape[-1]
    _check_square(D, m)
    if g.shape[-1] != m:
        raise ValueError(f"g has length {g.shape[-1]}, expected {m}")
    rhs = C + g
    if tau is not None:
        if tau.shape[-1] != m:
            raise ValueError(f"tau has length {tau.shape[-1]}, expected {m}")
        rhs = rhs - tau
    if isinstance(D, np.ndarray):
        return -_cho_solve_np(_cholesky_np(D), rhs)
    L, info = torch.linalg.cholesky_ex(D)
    if bool(info.any()):
        bad = torch.nonzero(info)[0]
        index = tuple(int(i) for i in bad)
        raise InertiaFactorizationError(D[index].detach(), index)
    return -torch.cholesky_solve(rhs.unsqueeze(-1), L).squeeze(-1)


def euler_step(z, zdot, dt: float) -> Array:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z, zdot = _coerce(z, zdot)
    return z + zdot * dt


def rk4_step(dynamics: Dynamics, z, dt: float) -> Array:
    """Classical fourth-order Runge-Kutta step of an autonomous system."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    (z,) = _coerce(z)
    k1 = dynamics(z)
    k2 = dynamics(z + 0.5 * dt * k1)
    k3 = dynamics(z + 0.5 * dt * k2)
    k4 = dynamics(z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(
    dynamics: Dynamics,
    z0,
    steps: int,
    dt: float,
    integrator: str = "euler",
    check_finite: bool = True,
) -> Array:
    """Integrate ``steps`` steps from ``z0``.

    Returns a tensor of shape ``(*batch, steps, 2m)``; ``z0`` itself is not
    included.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}; choose from {INTEGRATORS}")
    (z,) = _coerce(z0)
    is_torch = isinstance(z, torch.Tensor)
    out = []
    for step in range(1, steps + 1):
        if integrator == "euler":
            z = euler_step(z, dynamics(z), dt)
        else:
            z = rk4_step(dynamics, z, dt)
        if check_finite:
            if is_torch:
                bad = ~torch.isfinite(z).all(dim=-1)
                if bool(bad.any()):
                    idx = tuple(int(i) for i in torch.nonzero(bad)[0]) if bad.dim() else None
                    raise RolloutDivergedError(step, idx)
            elif not np.isfinite(z).all():
                bad = ~np.isfinite(z).all(axis=-1)
                idx = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.ndim else None
                raise RolloutDivergedError(step, idx)
        out.append(z)
    return torch.stack(out, dim=-2) if is_torch else np.stack(out, axis=-2)
