"""Convolutional auto-encoder between stacked-frame observations and latents.

Encoder: 4x4 convolutions with stride 2 and padding 1, each followed by
ReLU, then one fully-connected layer to the latent.  The decoder mirrors
it with transposed convolutions and ends in a sigmoid.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .nets import fan_in_uniform_

CHANNELS = (3, 12, 24, 12)
KERNEL = 4
STRIDE = 2
PADDING = 1
LATENT_DIMS = {"pendulum": 4, "acrobot": 6}


def conv_output_size(size: int) -> int:
    return (size + 2 * PADDING - KERNEL) // STRIDE + 1


def shape_trace(image_size: int, n_conv: int) -> list[int]:
    """Spatial size before and after each encoder convolution."""
    trace = [image_size]
    for _ in range(n_conv):
        trace.append(conv_output_size(trace[-1]))
    return trace


def _init_conv(layer: nn.Module) -> None:
    k = layer.kernel_size[0] * layer.kernel_size[1]
    if isinstance(layer, nn.ConvTranspose2d):
        # each output pixel sees in_channels * (k / stride)^2 weights
        fan_in = layer.in_channels * k // (layer.stride[0] * layer.stride[1])
    else:
        fan_in = layer.in_channels * k
    fan_in_uniform_(layer.weight, fan_in)
    nn.init.zeros_(layer.bias)


def _init_linear(layer: nn.Linear) -> None:
    fan_in_uniform_(layer.weight, layer.in_features)
    nn.init.zeros_(layer.bias)


def latent_split(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Interpret a latent as ``(q, qdot)``: first half and second half."""
    z = torch.as_tensor(z)
    if z.shape[-1] % 2:
        raise ValueError(f"latent length must be even, got {z.shape[-1]}")
    half = z.shape[-1] // 2
    return z[..., :half], z[..., half:]


def latent_join(q: torch.Tensor, qdot: torch.Tensor) -> torch.Tensor:
    return torch.cat([q, qdot], dim=-1)


class Encoder(nn.Module):
    def __init__(self, latent_dim: int, image_size: int = 32, channels: Sequence[int] = CHANNELS):
        super().__init__()
        self.latent_dim = int(latent_dim)
        self.image_size = int(image_size)
        self.channels = tuple(int(c) for c in channels)
        self.trace = shape_trace(self.image_size, len(self.channels) - 1)
        if self.trace[-1] < 1 or any(
            STRIDE * b != a for a, b in zip(self.trace[:-1], self.trace[1:])
        ):
            raise ValueError(
                f"image size {image_size} does not halve cleanly through "
                f"{len(self.channels) - 1} convolutions: {self.trace}"
            )
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, KERNEL, STRIDE, PADDING)
            for a, b in zip(self.channels[:-1], self.channels[1:])
        )
        self.flat_dim = self.channels[-1] * self.trace[-1] ** 2
        self.fc = nn.Linear(self.flat_dim, self.latent_dim)
        for conv in self.convs:
            _init_conv(conv)
        _init_linear(self.fc)
        self._audit()

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels[0], self.image_size, self.image_size)

    def _audit(self) -> None:
        with torch.no_grad():
            x = torch.zeros(1, *self.input_shape)
            for conv, s, c in zip(self.convs, self.trace[1:], self.channels[1:]):
                x = conv(x)
                if tuple(x.shape[1:]) != (c, s, s):
                    raise AssertionError(f"encoder layer produced {tuple(x.shape[1:])}, expected {(c, s, s)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.input_shape:
            raise ValueError(f"observation must be {self.input_shape}, got {tuple(x.shape[-3:])}")
        lead = x.shape[:-3]
        h = x.reshape(-1, *self.input_shape)
        for conv in self.convs:
            h = torch.relu(conv(h))
        z = self.fc(h.flatten(1))
        return z.reshape(*lead, self.latent_dim)


class Decoder(nn.Module):
    def __init__(self, latent_dim: int, image_size: int = 32, channels: Sequence[int] = CHANNELS):
        super().__init__()
        self.latent_dim = int(latent_dim)
        self.image_size = int(image_size)
        self.channels = tuple(int(c) for c in channels)
        self.trace = shape_trace(self.image_size, len(self.channels) - 1)
        self.base = self.trace[-1]
        self.fc = nn.Linear(self.latent_dim, self.channels[-1] * self.base**2)
        rev = self.channels[::-1]
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(a, b, KERNEL, STRIDE, PADDING) for a, b in zip(rev[:-1], rev[1:])
        )
        _init_linear(self.fc)
        for deconv in self.deconvs:
            _init_conv(deconv)
        with torch.no_grad():
            out = self._forward(torch.zeros(1, self.latent_dim))
        if tuple(out.shape[1:]) != self.output_shape:
            raise AssertionError(f"decoder produced {tuple(out.shape[1:])}, expected {self.output_shape}")

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.channels[0], self.image_size, self.image_size)

    def _forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.fc(z)).reshape(-1, self.channels[-1], self.base, self.base)
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.deconvs) - 1:
                h = torch.relu(h)
        return torch.sigmoid(h)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent must have length {self.latent_dim}, got {z.shape[-1]}")
        lead = z.shape[:-1]
        return self._forward(z.reshape(-1, self.latent_dim)).reshape(*lead, *self.output_shape)


class AutoEncoder(nn.Module):
    def __init__(self, latent_dim: int, image_size: int = 32, channels: Sequence[int] = CHANNELS):
        super().__init__()
        if latent_dim % 2:
            raise ValueError(f"latent dimension must be even, got {latent_dim}")
        self.encoder = Encoder(latent_dim, image_size, channels)
        self.decoder = Decoder(latent_dim, image_size, channels)

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    @property
    def m(self) -> int:
        return self.latent_dim // 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))

    def init_output_bias(self, mean_pixel: float) -> None:
        """Start the decoder at the average image intensity.

        With a zero bias the output begins at 0.5 on mostly-black frames;
        the race to darken it saturates the sigmoid before the latent is
        used, and reconstruction stalls at the blank image.
        """
        p = min(max(float(mean_pixel), 1e-4), 1 - 1e-4)
        with torch.no_grad():
            self.decoder.deconvs[-1].bias.fill_(math.log(p / (1 - p)))

    def metadata(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "image_size": self.encoder.image_size,
            "channels": list(self.encoder.channels),
        }


def encode(autoencoder: AutoEncoder, x) -> torch.Tensor:
    return autoencoder.encode(torch.as_tensor(x))


def decode(autoencoder: AutoEncoder, z) -> torch.Tensor:
    return autoencoder.decode(torch.as_tensor(z))


def pixel_count(autoencoder: AutoEncoder) -> int:
    return math.prod(autoencoder.decoder.output_shape)
