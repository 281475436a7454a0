"""Analytic-oracle checks run by ``lagvid selftest``.

Each check returns a :class:`CheckResult`.  The pieces under test are
parameters so that deliberately broken variants can be fed in.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import dynamics
from .nets import LagrangianModel, parameter_gradients
from .simulators import (
    SystemSpec,
    acrobot_dynamics,
    analytic_lagrangian,
    pendulum_dynamics,
    system_dynamics,
)
from .training import state_space_loss, video_losses
from .vision import AutoEncoder


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.value:>11.3e}  (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


def _timed(name: str, tol: float, fn: Callable[[], float], le: bool = True) -> CheckResult:
    start = time.perf_counter()
    try:
        value = float(fn())
        passed = value <= tol if le else value >= tol
    except (ValueError, FloatingPointError, RuntimeError):
        value, passed = math.inf, False
    if not math.isfinite(value):
        passed = False
    return CheckResult(name, passed, value, tol, time.perf_counter() - start)


def finite_difference_inertia_jacobian(inertia: Callable, q: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``inertia(q)``; entry ``[i, j, k] = dD[i, j]/dq[k]``."""
    m = q.shape[-1]
    out = np.zeros((m, m, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        Dp = np.asarray(inertia(q + e), dtype=np.float64)
        Dm = np.asarray(inertia(q - e), dtype=np.float64)
        out[:, :, k] = (Dp - Dm) / (2 * h)
    return out


def brute_force_coriolis(dD: np.ndarray, qdot: np.ndarray) -> np.ndarray:
    m = qdot.shape[0]
    C = np.zeros(m)
    for k in range(m):
        for i in range(m):
            for j in range(m):
                C[k] += (dD[k, j, i] - 0.5 * dD[i, j, k]) * qdot[i] * qdot[j]
    return C


def check_coriolis(coriolis=dynamics.coriolis_vector, n: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    spec = SystemSpec("acrobot")
    lag = analytic_lagrangian(spec)
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for _ in range(n):
            q = rng.uniform(-math.pi, math.pi, 2)
            qdot = rng.uniform(-3, 3, 2)
            oracle = brute_force_coriolis(finite_difference_inertia_jacobian(lag.inertia, q), qdot)
            got = np.asarray(coriolis(lag.inertia_jacobian(q), qdot))
            worst = max(worst, float(np.abs(got - oracle).max()))
        return worst

    return _timed("coriolis_vs_fd_oracle", tol, run)


def check_closure(n: int = 1000, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)

    def run():
        worst = 0.0
        for kind, direct in (("pendulum", pendulum_dynamics), ("acrobot", acrobot_dynamics)):
            spec = SystemSpec(kind)
            m = spec.m
            z = np.concatenate([rng.uniform(-math.pi, math.pi, (n, m)), rng.uniform(-5, 5, (n, m))], -1)
            assembled = analytic_lagrangian(spec).dynamics(z)
            worst = max(worst, float(np.abs(assembled - direct(z)).max()))
        return worst

    return _timed("analytic_closure", tol, run)


def energy_drift(spec: SystemSpec, z0, dt: float = 1e-3, duration: float = 10.0) -> float:
    """Max relative deviation of total energy along an RK4 rollout."""
    lag = analytic_lagrangian(spec)
    z0 = np.asarray(z0, dtype=np.float64)
    steps = int(round(duration / dt))
    traj = dynamics.rollout(system_dynamics(spec), z0, steps, dt, integrator="rk4")
    e0 = lag.energy(z0)[..., None]
    return float((np.abs(lag.energy(traj) - e0) / np.abs(e0)).max())


def check_energy(tol: float = 1e-4) -> CheckResult:
    def run():
        p = energy_drift(SystemSpec("pendulum"), [[1.0, 0.5], [2.5, -1.0]])
        a = energy_drift(SystemSpec("acrobot"), [[1.0, -0.5, 0.3, 0.2], [2.0, 1.0, -0.4, 0.5]])
        return max(p, a)

    return _timed("energy_conservation_rk4", tol, run)


def min_eigen_margin(lam: float | None = None, n: int = 1000, m: int = 2, seed: int = 0,
                     include_singular: bool = True) -> float:
    """Smallest ``eig_min(D) - m`` over random draws; ``-inf`` if Cholesky fails.

    ``lam`` overrides the regularizer of the network under test, while the
    required bound stays at the dimension ``m``.
    """
    torch.manual_seed(seed)
    model = LagrangianModel(m, hidden=16, lam=lam).double()
    gen = torch.Generator().manual_seed(seed)
    worst = math.inf
    draws = n - 1 if include_singular else n
    with torch.no_grad():
        for i in range(draws):
            for p in model.inertia_net.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 2.0)
            q = torch.randn(m, generator=gen, dtype=torch.float64) * 3.0
            D = model.inertia_matrix(q)
            _, info = torch.linalg.cholesky_ex(D)
            if int(info) != 0 or float((D - D.T).abs().max()) > 1e-12:
                return -math.inf
            worst = min(worst, float(torch.linalg.eigvalsh(D)[0]) - m)
        if include_singular:
            # a vanishing J network leaves only the regularizer
            for p in model.inertia_net.parameters():
                p.zero_()
            D = model.inertia_matrix(torch.zeros(m, dtype=torch.float64))
            _, info = torch.linalg.cholesky_ex(D)
            if int(info) != 0:
                return -math.inf
            worst = min(worst, float(torch.linalg.eigvalsh(D)[0]) - m)
    return worst


def check_spd(lam: float | None = None, tol: float = -1e-9) -> CheckResult:
    return _timed("inertia_spd", tol, lambda: min_eigen_margin(lam), le=False)


def gradient_check_state_space(hidden: int = 4, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error of reverse-mode vs central-difference gradients."""
    torch.manual_seed(seed)
    spec = SystemSpec("pendulum")
    model = LagrangianModel(1, hidden=hidden).double()
    rng = np.random.default_rng(seed)
    z0 = np.concatenate([rng.uniform(-2, 2, (3, 1)), rng.uniform(-1, 1, (3, 1))], -1)
    states = dynamics.rollout(system_dynamics(spec), z0, 2, spec.dt, "rk4")
    states = torch.from_numpy(np.concatenate([z0[:, None], states], 1))
    return _fd_worst(lambda: state_space_loss(model, states, spec.dt), list(model.named_parameters()), h)


def _fd_worst(loss_fn: Callable[[], torch.Tensor], named, h: float) -> float:
    loss = loss_fn()
    grads = parameter_gradients(loss, named)
    # below this the central difference is dominated by round-off
    floor = max(1e-6, 1e3 * np.finfo(np.float64).eps * abs(float(loss.detach())) / h)
    worst = 0.0
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                worst = max(worst, relative_error(float(grads[name].view(-1)[i]), fd, floor))
    return worst


def gradient_check_video(seed: int = 0, h: float = 1e-6, dt: float = 0.2) -> float:
    """Total video loss on 4x4 toy images with the production layer types."""
    torch.manual_seed(seed)
    model = LagrangianModel(2, hidden=4).double()
    ae = AutoEncoder(4, image_size=4, channels=(3, 2, 2)).double()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 3, 4, 4, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        # zero biases put ReLU pre-activations exactly on the kink
        for name, p in ae.named_parameters():
            if name.endswith("bias"):
                p.uniform_(-0.2, 0.2, generator=gen)
    named = list(model.named_parameters()) + [(f"autoencoder.{k}", v) for k, v in ae.named_parameters()]
    return _fd_worst(lambda: video_losses(model, ae, x, dt).total, named, h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(tol: float = 1e-4) -> CheckResult:
    return _timed("state_loss_gradients", tol, gradient_check_state_space)


def check_video_gradients(tol: float = 1e-3) -> CheckResult:
    return _timed("video_loss_gradients", tol, gradient_check_video)


def run_all(coriolis=dynamics.coriolis_vector, lam: float | None = None) -> list[CheckResult]:
    return [
        check_closure(),
        check_coriolis(coriolis),
        check_energy(),
        check_spd(lam),
        check_gradients(),
        check_video_gradients(),
    ]
