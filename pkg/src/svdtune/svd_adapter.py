"""Singular-value adapters for linear layers.

A frozen weight ``W = U diag(sigma) Vt`` is reparametrized as
``U diag(relu(scale * sigma + shift)) Vt``. Only ``scale`` and ``shift``
(one entry per singular value) receive gradients.
"""

from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class DecompositionInputError(ValueError):
    """Raised when a weight cannot be decomposed (bad shape, NaN/Inf)."""


class NumericalError(RuntimeError):
    """Raised when the SVD routine fails to converge."""


def _svd(weight: torch.Tensor, name: str):
    if weight.ndim != 2 or weight.shape[0] < 1 or weight.shape[1] < 1:
        raise DecompositionInputError(f"{name}: expected a non-empty 2-D weight, got shape {tuple(weight.shape)}")
    if not torch.isfinite(weight).all():
        raise DecompositionInputError(f"{name}: weight contains non-finite entries")
    try:
        # always factor in double, cast back to the working dtype afterwards
        u, s, vt = torch.linalg.svd(weight.detach().to(torch.float64), full_matrices=False)
    except RuntimeError as exc:  # torch.linalg.LinAlgError subclasses RuntimeError
        raise NumericalError(f"{name}: SVD did not converge ({exc})") from exc
    order = torch.argsort(s, descending=True, stable=True)
    return u[:, order], s[order], vt[order, :]


class SVDLinear(nn.Module):
    """Linear layer whose weight is ``U relu(scale*sigma + shift) Vt``.

    The factors ``U`` (D x R), ``sigma`` (R) and ``Vt`` (R x K) and the bias
    are buffers, so optimizers never see them. ``R = min(D, K)``.
    """

    def __init__(self, U: torch.Tensor, sigma: torch.Tensor, Vt: torch.Tensor,
                 bias: Optional[torch.Tensor] = None):
        super().__init__()
        rank = sigma.shape[0]
        if U.shape[1] != rank or Vt.shape[0] != rank:
            raise ValueError(f"factor shapes disagree: U {tuple(U.shape)}, sigma {tuple(sigma.shape)}, Vt {tuple(Vt.shape)}")
        self.out_features = U.shape[0]
        self.in_features = Vt.shape[1]
        self.register_buffer("U", U.contiguous())
        self.register_buffer("sigma", sigma.contiguous())
        self.register_buffer("Vt", Vt.contiguous())
        if bias is not None:
            self.register_buffer("bias", bias.detach().clone())
        else:
            self.bias = None
        self.scale = nn.Parameter(torch.ones(rank, dtype=sigma.dtype, device=sigma.device))
        self.shift = nn.Parameter(torch.zeros(rank, dtype=sigma.dtype, device=sigma.device))

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def from_linear(cls, linear: nn.Linear, name: str = "linear") -> "SVDLinear":
        return decompose(linear.weight, linear.bias, name=name)

    def effective_sigma(self) -> torch.Tensor:
        return F.relu(self.scale * self.sigma + self.shift)

    def effective_weight(self) -> torch.Tensor:
        return (self.U * self.effective_sigma()) @ self.Vt

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        # Vt x, then diag, then U: never materializes the D x K weight
        h = F.linear(x, self.Vt) * self.effective_sigma()
        return F.linear(h, self.U, self.bias)

    def merge(self) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Return ``(W', bias)`` for export without the adapter machinery."""
        with torch.no_grad():
            weight = self.effective_weight().clone()
        bias = None if self.bias is None else self.bias.clone()
        return weight, bias

    def to_linear(self) -> nn.Linear:
        weight, bias = self.merge()
        layer = nn.Linear(self.in_features, self.out_features, bias=bias is not None,
                          dtype=weight.dtype, device=weight.device)
        with torch.no_grad():
            layer.weight.copy_(weight)
            if bias is not None:
                layer.bias.copy_(bias)
        return layer

    def unfreeze_bias(self) -> None:
        if self.bias is not None and not isinstance(self.bias, nn.Parameter):
            bias = self._buffers.pop("bias")
            self.bias = nn.Parameter(bias)

    def trainable_count(self) -> int:
        return 2 * min(self.out_features, self.in_features)

    def extra_repr(self) -> str:
        return f"in_features={self.in_features}, out_features={self.out_features}, rank={self.rank}"


def decompose(weight: torch.Tensor, bias: Optional[torch.Tensor] = None, name: str = "weight") -> SVDLinear:
    """Factor ``weight`` (D x K) into an identity-initialized :class:`SVDLinear`.

    The thin SVD is computed in float64 and cast back to ``weight.dtype``.
    """
    u, s, vt = _svd(weight, name)
    dtype = weight.dtype
    return SVDLinear(u.to(dtype), s.to(dtype), vt.to(dtype), None if bias is None else bias.detach())


def effective_weight(state: SVDLinear) -> torch.Tensor:
    return state.effective_weight()


def trainable_count(state: SVDLinear) -> int:
    return state.trainable_count()
