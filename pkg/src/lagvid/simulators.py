"""Reference pendulum and acrobot systems, trajectory generation, rendering.

Angles are measured from the hanging-down position, positive
counter-clockwise.  All physical constants are fixed reference values
(unit masses and lengths, ``g = 9.81``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import dynamics

IMAGE_SIZE = 32
LINE_WIDTH = 3.0
FRAMES_PER_OBSERVATION = 3
SYSTEMS = ("pendulum", "acrobot")
RENDER_CHUNK = 256


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    dt: float = 0.05
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    mass2: float = 1.0
    length2: float = 1.0
    com1: float = 0.5
    com2: float = 0.5
    inertia1: float = 1.0
    inertia2: float = 1.0

    def __post_init__(self):
        if self.kind not in SYSTEMS:
            raise ValueError(f"unknown system {self.kind!r}; choose from {SYSTEMS}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for name, value in asdict(self).items():
            if name not in ("kind", "dt") and value <= 0:
                raise ValueError(f"physical parameter {name} must be positive, got {value}")

    @property
    def m(self) -> int:
        return 1 if self.kind == "pendulum" else 2

    @property
    def constants(self) -> dict:
        d = asdict(self)
        del d["kind"], d["dt"]
        return d


Fn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AnalyticLagrangian:
    """Closed-form ingredients of a reference system's Lagrangian."""

    inertia: Fn
    potential: Fn
    inertia_jacobian: Fn
    potential_gradient: Fn

    def dynamics(self, z, tau=None) -> np.ndarray:
        """Forward dynamics assembled through the generic Euler-Lagrange path."""
        q, qdot = dynamics.split_state(np.asarray(z, dtype=np.float64))
        C = dynamics.coriolis_vector(self.inertia_jacobian(q), qdot)
        qddot = dynamics.forward_dynamics(self.inertia(q), C, self.potential_gradient(q), tau)
        return np.concatenate([qdot, qddot], axis=-1)

    def energy(self, z) -> np.ndarray:
        q, qdot = dynamics.split_state(np.asarray(z, dtype=np.float64))
        return dynamics.kinetic_energy(self.inertia(q), qdot) + self.potential(q)


def _as_state(z, m: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != 2 * m:
        raise ValueError(f"state must have length {2 * m}, got {z.shape[-1]}")
    return z


def _acrobot_coefficients(spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """``D(q) = base + coupling * cos(q2)`` for the two-link arm."""
    m1, m2, l1 = spec.mass, spec.mass2, spec.length
    lc1, lc2, I1, I2 = spec.com1, spec.com2, spec.inertia1, spec.inertia2
    d11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2) + I1 + I2
    d12 = m2 * lc2**2 + I2
    d22 = m2 * lc2**2 + I2
    k = m2 * l1 * lc2
    return np.array([[d11, d12], [d12, d22]]), np.array([[2 * k, k], [k, 0.0]])


def pendulum_dynamics(z, tau=None, spec: SystemSpec | None = None) -> np.ndarray:
    spec = spec or SystemSpec("pendulum")
    q, qdot = dynamics.split_state(_as_state(z, 1))
    qddot = -(spec.gravity / spec.length) * np.sin(q)
    if tau is not None:
        qddot = qddot + np.asarray(tau, dtype=np.float64) / (spec.mass * spec.length**2)
    return np.concatenate([qdot, qddot], axis=-1)


def acrobot_dynamics(z, tau=None, spec: SystemSpec | None = None) -> np.ndarray:
    """Two-link arm with closed-form Coriolis and gravity terms."""
    spec = spec or SystemSpec("acrobot")
    q, qdot = dynamics.split_state(_as_state(z, 2))
    base, coupling = _acrobot_coefficients(spec)
    k = spec.mass2 * spec.length * spec.com2
    q1, q2 = q[..., 0], q[..., 1]
    dq1, dq2 = qdot[..., 0], qdot[..., 1]
    D = base + coupling * np.cos(q2)[..., None, None]
    h = -k * np.sin(q2)
    C = np.stack([h * dq2**2 + 2 * h * dq1 * dq2, -h * dq1**2], axis=-1)
    s1, s12 = np.sin(q1), np.sin(q1 + q2)
    g0 = spec.gravity
    g = np.stack(
        [(spec.mass * spec.com1 + spec.mass2 * spec.length) * g0 * s1 + spec.mass2 * spec.com2 * g0 * s12,
         spec.mass2 * spec.com2 * g0 * s12],
        axis=-1,
    )
    qddot = dynamics.forward_dynamics(D, C, g, tau)
    return np.concatenate([qdot, qddot], axis=-1)


def system_dynamics(spec: SystemSpec) -> Fn:
    if spec.kind == "pendulum":
        return lambda z: pendulum_dynamics(z, spec=spec)
    return lambda z: acrobot_dynamics(z, spec=spec)


def analytic_lagrangian(spec: SystemSpec) -> AnalyticLagrangian:
    """Closed-form inertia, potential and their configuration derivatives."""
    if spec.kind == "pendulum":
        mp, l, g0 = spec.mass, spec.length, spec.gravity

        def inertia(q):
            q = np.asarray(q, dtype=np.float64)
            return np.full(q.shape + (1,), mp * l**2)

        def potential(q):
            return -mp * g0 * l * np.cos(np.asarray(q, dtype=np.float64)[..., 0])

        def inertia_jacobian(q):
            q = np.asarray(q, dtype=np.float64)
            return np.zeros(q.shape + (1, 1))

        def potential_gradient(q):
            return mp * g0 * l * np.sin(np.asarray(q, dtype=np.float64))

        return AnalyticLagrangian(inertia, potential, inertia_jacobian, potential_gradient)

    m1, m2, l1, lc1, lc2, g0 = (
        spec.mass, spec.mass2, spec.length, spec.com1, spec.com2, spec.gravity
    )
    base, coupling = _acrobot_coefficients(spec)

    def inertia(q):
        q = np.asarray(q, dtype=np.float64)
        return base + coupling * np.cos(q[..., 1])[..., None, None]

    def potential(q):
        q = np.asarray(q, dtype=np.float64)
        q1, q2 = q[..., 0], q[..., 1]
        return -m1 * g0 * lc1 * np.cos(q1) - m2 * g0 * (l1 * np.cos(q1) + lc2 * np.cos(q1 + q2))

    def inertia_jacobian(q):
        q = np.asarray(q, dtype=np.float64)
        out = np.zeros(q.shape[:-1] + (2, 2, 2))
        # only dq2 derivatives are nonzero
        out[..., 1] = -coupling * np.sin(q[..., 1])[..., None, None]
        return out

    def potential_gradient(q):
        q = np.asarray(q, dtype=np.float64)
        q1, q2 = q[..., 0], q[..., 1]
        s12 = np.sin(q1 + q2)
        return np.stack(
            [m1 * g0 * lc1 * np.sin(q1) + m2 * g0 * (l1 * np.sin(q1) + lc2 * s12), m2 * g0 * lc2 * s12],
            axis=-1,
        )

    return AnalyticLagrangian(inertia, potential, inertia_jacobian, potential_gradient)


def total_energy(spec: SystemSpec, z) -> np.ndarray:
    return analytic_lagrangian(spec).energy(z)


@dataclass
class TrajectoryDataset:
    """Ground-truth phase-state trajectories, shape ``(N, T, 2m)``."""

    states: np.ndarray
    spec: SystemSpec
    seed: int | None = None

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[-1] != 2 * self.spec.m:
            raise ValueError(f"states must be (N, T, {2 * self.spec.m}), got {self.states.shape}")
        if not np.isfinite(self.states).all():
            raise ValueError("trajectory states contain non-finite values")

    @property
    def dt(self) -> float:
        return self.spec.dt

    def __len__(self) -> int:
        return self.states.shape[0]


def initial_states(spec: SystemSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    m = spec.m
    vmax = 1.0 if spec.kind == "pendulum" else 0.5
    q = rng.uniform(-math.pi, math.pi, size=(n, m))
    qdot = rng.uniform(-vmax, vmax, size=(n, m))
    return np.concatenate([q, qdot], axis=-1)


def generate_trajectories(spec: SystemSpec, n: int, t: int, seed: int = 0) -> TrajectoryDataset:
    """Sample ``n`` initial states and integrate each for ``t - 1`` RK4 steps."""
    if n < 1 or t < 1:
        raise ValueError(f"n and t must be >= 1, got n={n}, t={t}")
    rng = np.random.default_rng(seed)
    z0 = initial_states(spec, n, rng)
    states = z0[:, None]
    if t > 1:
        rest = dynamics.rollout(system_dynamics(spec), z0, t - 1, spec.dt, integrator="rk4")
        states = np.concatenate([states, rest], axis=1)
    return TrajectoryDataset(states, spec, seed)


def link_endpoints(spec: SystemSpec, q, size: int = IMAGE_SIZE) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pixel-space ``(start, end)`` points of every link, shape ``(..., 2)`` as (x, y)."""
    q = np.mod(np.asarray(q, dtype=np.float64), 2 * math.pi)
    if q.shape[-1] != spec.m:
        raise ValueError(f"configuration must have length {spec.m}, got {q.shape[-1]}")
    if spec.kind == "pendulum":
        pivot = np.array([size / 2, size / 2])
        scale = 0.375 * size
        lengths = [spec.length]
    else:
        pivot = np.array([size / 2, size / 3])
        scale = 0.3 * size / (spec.length + spec.length2)
        lengths = [spec.length, spec.length2]
    segments = []
    start = np.broadcast_to(pivot, q.shape[:-1] + (2,))
    angle = np.zeros(q.shape[:-1])
    for i, length in enumerate(lengths):
        angle = angle + q[..., i]
        # image y axis points down; q = 0 hangs straight down
        end = start + scale * length * np.stack([np.sin(angle), np.cos(angle)], axis=-1)
        segments.append((start, end))
        start = end
    return segments


def render_frames(spec: SystemSpec, q, size: int = IMAGE_SIZE, width: float = LINE_WIDTH) -> np.ndarray:
    """Rasterize configurations ``(..., m)`` into frames ``(..., size, size)``.

    Links are anti-aliased capsules: a pixel's intensity falls off linearly
    over one pixel around the distance ``width / 2`` from the link segment.
    """
    q = np.asarray(q, dtype=np.float64)
    centers = np.arange(size) + 0.5
    py, px = np.meshgrid(centers, centers, indexing="ij")
    pix = np.stack([px, py], axis=-1)  # (size, size, 2), x then y
    image = np.zeros(q.shape[:-1] + (size, size))
    for a, b in link_endpoints(spec, q, size):
        a = a[..., None, None, :]
        b = b[..., None, None, :]
        ab = b - a
        denom = np.maximum((ab * ab).sum(-1), 1e-12)
        s = np.clip(((pix - a) * ab).sum(-1) / denom, 0.0, 1.0)
        dist = np.linalg.norm(pix - (a + s[..., None] * ab), axis=-1)
        image = np.maximum(image, np.clip(width / 2 + 0.5 - dist, 0.0, 1.0))
    return image.astype(np.float32)


def render_frame(spec: SystemSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("render_frame takes a single configuration; use render_frames for batches")
    return render_frames(spec, q)


def build_observations(frames) -> np.ndarray:
    """Stack frames ``(..., F, H, W)`` into observations ``(..., F - 2, 3, H, W)``.

    Observation ``t`` holds frames ``t, t+1, t+2`` along the channel axis.
    """
    frames = np.asarray(frames)
    if frames.ndim < 3:
        raise ValueError(f"frames must be (..., F, H, W), got shape {frames.shape}")
    n = frames.shape[-3]
    if n < FRAMES_PER_OBSERVATION:
        raise ValueError(f"need at least {FRAMES_PER_OBSERVATION} frames, got {n}")
    views = [frames[..., k : n - FRAMES_PER_OBSERVATION + 1 + k, :, :] for k in range(FRAMES_PER_OBSERVATION)]
    return np.stack(views, axis=-3)


@dataclass
class ObservationDataset:
    """Rendered trajectories.

    ``frames`` is ``(N, T + 2, H, W)`` and ``states`` the per-frame ground
    truth ``(N, T + 2, 2m)``.  Observation ``t`` stacks frames ``t..t+2``;
    its latent ground truth is the state of the middle frame.
    """

    frames: np.ndarray
    states: np.ndarray
    spec: SystemSpec
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.shape[:2] != self.states.shape[:2]:
            raise ValueError(
                f"frames {self.frames.shape[:2]} and states {self.states.shape[:2]} disagree"
            )
        if self.frames.shape[1] < FRAMES_PER_OBSERVATION:
            raise ValueError("an observation dataset needs at least 3 frames per trajectory")

    @property
    def T(self) -> int:
        return self.frames.shape[1] - FRAMES_PER_OBSERVATION + 1

    @property
    def dt(self) -> float:
        return self.spec.dt

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def observations(self) -> np.ndarray:
        return build_observations(self.frames)

    @property
    def latent_truth(self) -> np.ndarray:
        return self.states[:, 1 : self.T + 1]

    def trajectories(self) -> TrajectoryDataset:
        """State trajectories ``z_0..z_T`` aligned with the observation count."""
        return TrajectoryDataset(self.states[:, : self.T + 1], self.spec, self.seed)

    def subset(self, index) -> "ObservationDataset":
        return ObservationDataset(self.frames[index], self.states[index], self.spec, self.seed)


def generate_observations(spec: SystemSpec, n: int, t: int, seed: int = 0) -> ObservationDataset:
    """Render ``n`` trajectories of ``t`` observations (``t + 2`` frames each)."""
    traj = generate_trajectories(spec, n, t + FRAMES_PER_OBSERVATION - 1, seed)
    q = traj.states[..., : spec.m]
    frames = np.concatenate(
        [render_frames(spec, q[i : i + RENDER_CHUNK]) for i in range(0, n, RENDER_CHUNK)]
    )
    return ObservationDataset(frames, traj.states, spec, seed)
