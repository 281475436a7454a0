"""Losses, optimization loops and rollout evaluation for both regimes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import dynamics
from .nets import LagrangianModel, parameter_gradients
from .simulators import FRAMES_PER_OBSERVATION, ObservationDataset, TrajectoryDataset
from .vision import LATENT_DIMS, AutoEncoder

log = logging.getLogger(__name__)

REGIMES = ("state_space", "video")
ABLATIONS = ("full", "no_dyn", "no_lat", "no_ae")
LAT_NORMS = ("l2sq", "l1")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")


@dataclass
class TrainConfig:
    regime: str = "state_space"
    system: str = "pendulum"
    lr: float | None = None
    weight_decay: float = 1e-5
    gamma: float = 0.1
    batch_size: int = 64
    epochs: int | None = None
    seed: int = 0
    ablation: str = "full"
    integrator: str = "euler"
    lat_norm: str = "l2sq"
    hidden: int = 200
    dtype: str | None = None
    train_fraction: float = 0.8
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.lat_norm not in LAT_NORMS:
            raise ValueError(f"lat_norm must be one of {LAT_NORMS}, got {self.lat_norm!r}")
        if self.integrator not in dynamics.INTEGRATORS:
            raise ValueError(f"integrator must be one of {dynamics.INTEGRATORS}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lr is None:
            self.lr = 1e-4 if (self.regime == "video" and self.system == "acrobot") else 1e-3
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs is None:
            self.epochs = 50 if self.regime == "state_space" else 100
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.dtype is None:
            self.dtype = "float64" if self.regime == "state_space" else "float32"
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_ae: torch.Tensor | float
    l_dyn: torch.Tensor | float
    l_lat: torch.Tensor | float
    total: torch.Tensor | float

    def floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(v.detach()) for v in (self.l_ae, self.l_dyn, self.l_lat, self.total)))

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self.floats()).items()}


def ablation_weights(ablation: str, gamma: float) -> tuple[float, float, float]:
    w_ae, w_dyn, w_lat = 1.0, 1.0, gamma
    if ablation == "no_ae":
        w_ae = 0.0
    elif ablation == "no_dyn":
        w_dyn = 0.0
    elif ablation == "no_lat":
        w_lat = 0.0
    elif ablation != "full":
        raise ValueError(f"unknown ablation {ablation!r}")
    return w_ae, w_dyn, w_lat


def _rollout(model, z0, steps, dt, integrator):
    return dynamics.rollout(model, z0, steps, dt, integrator=integrator)


def state_space_loss(model: LagrangianModel, states, dt: float, integrator: str = "euler") -> torch.Tensor:
    """Sum of absolute rollout errors over steps and components, averaged over trajectories.

    ``states`` is ``(N, T + 1, 2m)``: the first entry seeds the rollout and
    the remaining ``T`` are targets.
    """
    states = torch.as_tensor(states)
    if states.ndim != 3 or states.shape[1] < 2:
        raise ValueError(f"states must be (N, T + 1, 2m) with T >= 1, got {tuple(states.shape)}")
    n, steps = states.shape[0], states.shape[1] - 1
    pred = _rollout(model, states[:, 0], steps, dt, integrator)
    return (pred - states[:, 1:]).abs().sum() / n


def observations_from_frames(frames: torch.Tensor) -> torch.Tensor:
    """Torch counterpart of ``simulators.build_observations`` for ``(N, F, H, W)``."""
    k = FRAMES_PER_OBSERVATION
    n = frames.shape[1]
    if n < k:
        raise ValueError(f"need at least {k} frames, got {n}")
    return torch.stack([frames[:, i : n - k + 1 + i] for i in range(k)], dim=2)


def video_losses(
    model: LagrangianModel,
    autoencoder: AutoEncoder,
    observations,
    dt: float,
    gamma: float = 0.1,
    ablation: str = "full",
    lat_norm: str = "l2sq",
    integrator: str = "euler",
) -> LossBreakdown:
    """Auto-encoding, predicted-reconstruction and latent-consistency losses.

    ``observations`` is ``(N, T, C, H, W)``.  The latent rollout starts at
    the encoding of the first observation and runs ``T - 1`` steps.
    """
    x = torch.as_tensor(observations)
    if x.ndim != 5:
        raise ValueError(f"observations must be (N, T, C, H, W), got {tuple(x.shape)}")
    n, t = x.shape[:2]
    z = autoencoder.encode(x)
    l_ae = ((autoencoder.decode(z) - x) ** 2).sum() / (n * t)
    if t >= 2:
        zhat = _rollout(model, z[:, 0], t - 1, dt, integrator)
        l_dyn = ((autoencoder.decode(zhat) - x[:, 1:]) ** 2).sum() / (n * t)
        diff = zhat - z[:, 1:]
        l_lat = (diff**2 if lat_norm == "l2sq" else diff.abs()).sum() / n
    else:
        l_dyn = l_lat = torch.zeros((), dtype=x.dtype)
    w_ae, w_dyn, w_lat = ablation_weights(ablation, gamma)
    total = w_ae * l_ae + w_dyn * l_dyn + w_lat * l_lat
    return LossBreakdown(l_ae, l_dyn, l_lat, total)


def train_test_split(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def build_models(config: TrainConfig, m: int, latent_dim: int | None = None,
                 image_size: int = 32, channels: Sequence[int] | None = None):
    """Fresh models seeded from ``config.seed``."""
    torch.manual_seed(config.seed)
    if config.regime == "state_space":
        return LagrangianModel(m, hidden=config.hidden).to(config.torch_dtype), None
    latent_dim = latent_dim or LATENT_DIMS[config.system]
    kwargs = {} if channels is None else {"channels": channels}
    ae = AutoEncoder(latent_dim, image_size=image_size, **kwargs).to(config.torch_dtype)
    model = LagrangianModel(latent_dim // 2, hidden=config.hidden).to(config.torch_dtype)
    return model, ae


@dataclass
class TrainResult:
    model: LagrangianModel
    autoencoder: AutoEncoder | None
    history: list[dict] = field(default_factory=list)


def _training_tensor(config: TrainConfig, data) -> tuple[torch.Tensor, float]:
    if config.regime == "state_space":
        if isinstance(data, ObservationDataset):
            data = data.trajectories()
        if not isinstance(data, TrajectoryDataset):
            raise TypeError("state_space training needs a TrajectoryDataset")
        return torch.as_tensor(data.states, dtype=config.torch_dtype), data.dt
    if not isinstance(data, ObservationDataset):
        raise TypeError("video training needs an ObservationDataset")
    return torch.as_tensor(data.frames, dtype=config.torch_dtype), data.dt


def batch_loss(config: TrainConfig, model, autoencoder, batch: torch.Tensor, dt: float) -> LossBreakdown:
    if config.regime == "state_space":
        loss = state_space_loss(model, batch, dt, config.integrator)
        zero = torch.zeros((), dtype=loss.dtype)
        return LossBreakdown(zero, zero, zero, loss)
    return video_losses(
        model, autoencoder, observations_from_frames(batch), dt,
        config.gamma, config.ablation, config.lat_norm, config.integrator,
    )


def train(
    config: TrainConfig,
    data,
    model: LagrangianModel | None = None,
    autoencoder: AutoEncoder | None = None,
    on_epoch: Callable[[int, dict, TrainResult], None] | None = None,
) -> TrainResult:
    """Minimize the regime's loss with Adam.

    ``data`` is the training split.  Models are built from ``config.seed``
    when not supplied; they are updated in place.
    """
    tensor, dt = _training_tensor(config, data)
    if model is None:
        latent = None
        image_size = 32
        if config.regime == "video":
            image_size = tensor.shape[-1]
        model, ae = build_models(config, data.spec.m, latent, image_size)
        if autoencoder is None and ae is not None:
            ae.init_output_bias(float(tensor.mean()))
            autoencoder = ae
    if config.regime == "video" and autoencoder is None:
        raise ValueError("video training needs an auto-encoder")
    modules = {"lagrangian": model}
    if autoencoder is not None and config.regime == "video":
        modules["autoencoder"] = autoencoder
    named = [(f"{k}.{n}", p) for k, mod in modules.items() for n, p in mod.named_parameters()]
    optimizer = torch.optim.Adam([p for _, p in named], lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model, autoencoder)
    n = tensor.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        sums = np.zeros(4)
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = tensor[order[start : start + config.batch_size]]
            try:
                losses = batch_loss(config, model, autoencoder, batch, dt)
            except (dynamics.RolloutDivergedError, dynamics.InertiaFactorizationError) as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            if not math.isfinite(float(losses.total.detach())):
                raise TrainingDivergedError(epoch, b)
            grads = parameter_gradients(losses.total, named)
            for name, p in named:
                p.grad = grads[name]
            optimizer.step()
            sums += batch.shape[0] * np.array(
                [float(v.detach()) for v in (losses.l_ae, losses.l_dyn, losses.l_lat, losses.total)]
            )
        record = {"epoch": epoch, **dict(zip(("l_ae", "l_dyn", "l_lat", "total"), (sums / n).tolist()))}
        result.history.append(record)
        log.info("epoch %d total %.6g", epoch, record["total"])
        if on_epoch is not None:
            on_epoch(epoch, record, result)
    return result


@dataclass
class EvalReport:
    """Per-step rollout errors averaged over trajectories.

    ``steps`` are time indices relative to the initial observation; an
    entry is in range when the training sequences covered that index.
    ``errors`` holds ``None`` where no ground truth exists.
    """

    metric: str
    steps: list[int]
    errors: list[float | None]
    in_range: list[bool]
    n_trajectories: int

    @property
    def in_range_errors(self) -> list[float | None]:
        return [e for e, r in zip(self.errors, self.in_range) if r]

    @property
    def extrapolation_errors(self) -> list[float | None]:
        return [e for e, r in zip(self.errors, self.in_range) if not r]

    @staticmethod
    def _mean(values) -> float | None:
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "n_trajectories": self.n_trajectories,
            "n_in_range": sum(self.in_range),
            "n_extrapolation": len(self.in_range) - sum(self.in_range),
            "mean_in_range": self._mean(self.in_range_errors),
            "mean_extrapolation": self._mean(self.extrapolation_errors),
            "mean_all": self._mean(self.errors),
        }

    def to_csv(self) -> str:
        lines = ["step,segment,error"]
        for s, e, r in zip(self.steps, self.errors, self.in_range):
            lines.append(f"{s},{'in_range' if r else 'extrapolation'},{'' if e is None else repr(e)}")
        return "\n".join(lines) + "\n"


def predict_states(model, z0, horizon: int, dt: float, integrator: str = "euler") -> torch.Tensor:
    """States after ``1..horizon`` steps, ``(N, horizon, 2m)``."""
    with torch.no_grad():
        return _rollout(model, torch.as_tensor(z0), horizon, dt, integrator)


def predict_observations(model, autoencoder, x0, horizon: int, dt: float,
                         integrator: str = "euler") -> tuple[torch.Tensor, torch.Tensor]:
    """Decoded predictions for time indices ``0..horizon-1``.

    Index 0 is the reconstruction of the encoded first observation.
    """
    with torch.no_grad():
        z0 = autoencoder.encode(torch.as_tensor(x0))
        if horizon > 1:
            zhat = torch.cat([z0.unsqueeze(1), _rollout(model, z0, horizon - 1, dt, integrator)], 1)
        else:
            zhat = z0.unsqueeze(1)
        return zhat, autoencoder.decode(zhat)


def zero_acceleration_rollout(z0, horizon: int, dt: float) -> torch.Tensor:
    """Baseline that keeps the initial velocity: ``q_t = q_0 + t dt qdot_0``."""
    z0 = torch.as_tensor(z0)
    m = z0.shape[-1] // 2

    def free(z):
        return torch.cat([z[..., m:], torch.zeros_like(z[..., m:])], dim=-1)

    return _rollout(free, z0, horizon, dt, "euler")


def evaluate_rollout(
    model: LagrangianModel,
    truth,
    horizon: int,
    dt: float,
    in_range: int,
    autoencoder: AutoEncoder | None = None,
    integrator: str = "euler",
) -> EvalReport:
    """Roll out from the first ground-truth entry and score each step.

    State regime: ``truth`` is ``(N, K, 2m)``; reported steps are
    ``1..horizon`` and the metric is mean absolute state error.
    Video regime: ``truth`` is ``(N, K, C, H, W)``; reported steps are
    ``0..horizon-1`` (0 is the auto-encoded first observation) and the
    metric is per-pixel squared error.  Steps with index ``< in_range`` are
    in range; the rest are extrapolation.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    truth = torch.as_tensor(truth)
    available = truth.shape[1]
    if autoencoder is None:
        pred = predict_states(model, truth[:, 0], horizon, dt, integrator)
        steps = list(range(1, horizon + 1))
        metric = "state_mae"

        def err(k, s):
            return float((pred[:, k] - truth[:, s]).abs().mean())
    else:
        _, pred = predict_observations(model, autoencoder, truth[:, 0], horizon, dt, integrator)
        steps = list(range(horizon))
        metric = "pixel_mse"

        def err(k, s):
            return float(((pred[:, k] - truth[:, s]) ** 2).mean())

    errors = [err(k, s) if s < available else None for k, s in enumerate(steps)]
    return EvalReport(metric, steps, errors, [s < in_range for s in steps], truth.shape[0])


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
