"""Neural parameterization of a Lagrangian ``L = 0.5 qdot^T D(q) qdot - V(q)``.

The inertia network outputs a flat ``m*m`` vector reshaped row-major into
``J(q)``; the inertia matrix is ``D(q) = J^T J + lam * I``.  Input
derivatives (``dV/dq`` and ``dD/dq``) are propagated in forward mode
alongside the activations, so they are exact and remain differentiable with
respect to the network parameters.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
from torch import nn

from . import dynamics

HIDDEN_WIDTH = 200
NUM_LAYERS = 3

Layer = tuple[torch.Tensor, torch.Tensor]


def mlp_forward(layers: Sequence[Layer], x: torch.Tensor) -> torch.Tensor:
    """Affine layers with tanh between them and an identity output.

    ``layers`` holds ``(W, b)`` pairs with ``W`` shaped ``(out, in)``.
    """
    x = torch.as_tensor(x)
    for i, (W, b) in enumerate(layers):
        if x.shape[-1] != W.shape[1]:
            raise ValueError(
                f"layer {i} expects input of length {W.shape[1]}, got {x.shape[-1]}"
            )
        x = x @ W.T + b
        if i < len(layers) - 1:
            x = torch.tanh(x)
    return x


def mlp_forward_with_jacobian(
    layers: Sequence[Layer], x: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(y, dy/dx)`` with the Jacobian shaped ``(..., out, in)``."""
    x = torch.as_tensor(x)
    n_in = x.shape[-1]
    tangent = torch.eye(n_in, dtype=x.dtype, device=x.device).expand(*x.shape[:-1], n_in, n_in)
    for i, (W, b) in enumerate(layers):
        if x.shape[-1] != W.shape[1]:
            raise ValueError(
                f"layer {i} expects input of length {W.shape[1]}, got {x.shape[-1]}"
            )
        x = x @ W.T + b
        tangent = W @ tangent
        if i < len(layers) - 1:
            x = torch.tanh(x)
            tangent = (1.0 - x * x).unsqueeze(-1) * tangent
    return x, tangent


def fan_in_uniform_(weight: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


class MLP(nn.Module):
    def __init__(self, sizes: Sequence[int]):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.linears = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for lin in self.linears:
            fan_in_uniform_(lin.weight, lin.in_features)
            nn.init.zeros_(lin.bias)

    @property
    def layers(self) -> list[Layer]:
        return [(lin.weight, lin.bias) for lin in self.linears]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.layers, x)

    def forward_with_jacobian(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return mlp_forward_with_jacobian(self.layers, x)


def _mlp_sizes(n_in: int, n_out: int, hidden: int, num_layers: int) -> list[int]:
    return [n_in] + [hidden] * (num_layers - 1) + [n_out]


class LagrangianModel(nn.Module):
    """Inertia network ``J_theta`` and potential network ``V_phi``.

    Calling the module on a phase state ``z = (q, qdot)`` returns the
    dynamical update ``(qdot, qddot)`` from the Euler-Lagrange equations.
    """

    def __init__(
        self,
        m: int,
        hidden: int = HIDDEN_WIDTH,
        num_layers: int = NUM_LAYERS,
        lam: float | None = None,
    ):
        super().__init__()
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        self.m = int(m)
        self.hidden = int(hidden)
        self.num_layers = int(num_layers)
        self.lam = float(self.m if lam is None else lam)
        self.inertia_net = MLP(_mlp_sizes(m, m * m, hidden, num_layers))
        self.potential_net = MLP(_mlp_sizes(m, 1, hidden, num_layers))

    def _check_q(self, q: torch.Tensor) -> torch.Tensor:
        q = torch.as_tensor(q)
        if q.shape[-1] != self.m:
            raise ValueError(f"q must have length {self.m}, got {q.shape[-1]}")
        return q

    def _eye(self, q: torch.Tensor) -> torch.Tensor:
        return torch.eye(self.m, dtype=q.dtype, device=q.device)

    def j_matrix(self, q: torch.Tensor) -> torch.Tensor:
        q = self._check_q(q)
        return self.inertia_net(q).reshape(*q.shape[:-1], self.m, self.m)

    def inertia_matrix(self, q: torch.Tensor) -> torch.Tensor:
        J = self.j_matrix(q)
        return J.transpose(-1, -2) @ J + self.lam * self._eye(J)

    def potential(self, q: torch.Tensor) -> torch.Tensor:
        return self.potential_net(self._check_q(q)).squeeze(-1)

    def potential_force(self, q: torch.Tensor) -> torch.Tensor:
        """Exact gradient ``g(q) = dV/dq``."""
        _, jac = self.potential_net.forward_with_jacobian(self._check_q(q))
        return jac[..., 0, :]

    def _inertia_and_jacobian(self, q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q = self._check_q(q)
        m = self.m
        flat, dflat = self.inertia_net.forward_with_jacobian(q)
        J = flat.reshape(*q.shape[:-1], m, m)
        # dJ[..., a, i, k] = dJ[a, i] / dq[k]
        dJ = dflat.reshape(*q.shape[:-1], m, m, m)
        D = J.transpose(-1, -2) @ J + self.lam * self._eye(q)
        half = torch.einsum("...aik,...aj->...ijk", dJ, J)
        dD = half + half.transpose(-3, -2)
        return D, dD

    def inertia_jacobian(self, q: torch.Tensor) -> torch.Tensor:
        return self._inertia_and_jacobian(q)[1]

    def forward(self, z: torch.Tensor, tau: torch.Tensor | None = None) -> torch.Tensor:
        q, qdot = dynamics.split_state(torch.as_tensor(z))
        D, dD = self._inertia_and_jacobian(q)
        C = dynamics.coriolis_vector(dD, qdot)
        g = self.potential_force(q)
        qddot = dynamics.forward_dynamics(D, C, g, tau)
        return torch.cat([qdot, qddot], dim=-1)

    def energy(self, z: torch.Tensor) -> torch.Tensor:
        q, qdot = dynamics.split_state(torch.as_tensor(z))
        return dynamics.kinetic_energy(self.inertia_matrix(q), qdot) + self.potential(q)

    def metadata(self) -> dict:
        return {
            "m": self.m,
            "lam": self.lam,
            "hidden": self.hidden,
            "num_layers": self.num_layers,
            "inertia_sizes": list(self.inertia_net.sizes),
            "potential_sizes": list(self.potential_net.sizes),
        }


def model_dynamics(model: LagrangianModel, z, tau=None) -> torch.Tensor:
    return model(z, tau)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter block {name!r}")


def parameter_gradients(
    loss: torch.Tensor,
    named_parameters: Iterable[tuple[str, torch.Tensor]],
    retain_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` keyed by parameter name.

    Parameters the loss does not depend on get zero gradients.
    """
    named = [(n, p) for n, p in named_parameters if p.requires_grad]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(
        loss, [p for _, p in named], retain_graph=retain_graph, allow_unused=True
    )
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(name)
        out[name] = g
    return out
