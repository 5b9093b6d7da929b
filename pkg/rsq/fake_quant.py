from numbers import Real
from typing import Any

from beartype import beartype
import numpy as np
import torch
from torch import nn
from torch import autograd

from kernels.tensor import TensorF32
from kernels.quantizer import EPS_SCALE, QuantScheme, fake_quantize


@beartype
def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


@beartype
def fq_values(v: torch.Tensor, s: torch.Tensor, t_s: int) -> torch.Tensor:
    """s * round(clip(v / s, -T_s, T_s))"""
    return s * round_half_away(torch.clamp(v / s, -t_s, t_s))


@beartype
def fq_partials(v: torch.Tensor, s: torch.Tensor, t_s: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-through partials dQ/dv and dQ/ds, element-wise"""
    r = v / s
    inside = (r >= -t_s) & (r <= t_s)
    dq_dv = inside.to(v.dtype)
    dq_ds = torch.where(
        r > t_s,
        torch.full_like(r, float(t_s)),
        torch.where(r < -t_s, torch.full_like(r, -float(t_s)), round_half_away(r) - r),
    )
    return dq_dv, dq_ds


class FakeQuantFn(autograd.Function):
    """Fake quantization whose backward pass is the straight-through estimator"""

    @staticmethod
    def forward(ctx: Any, v: torch.Tensor, s: torch.Tensor, t_s: int) -> torch.Tensor:
        ctx.save_for_backward(v, s)
        ctx.t_s = t_s
        return fq_values(v, s, t_s)

    @staticmethod
    def backward(ctx: Any, grad_out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, None]:
        v, s = ctx.saved_tensors
        dq_dv, dq_ds = fq_partials(v, s, ctx.t_s)
        return grad_out * dq_dv, (grad_out * dq_ds).sum().reshape(s.shape), None


class FakeQuantParam(nn.Module):
    """Learnable step size `s` of one quantized tensor"""

    @beartype
    def __init__(self, scheme: QuantScheme, init_scale: Real = 1.):
        super().__init__()
        self.scheme = scheme
        self.s = nn.Parameter(torch.tensor(float(init_scale), dtype=torch.float64))
        self.clamp_()

    @property
    def scale(self) -> float:
        return float(self.s.detach().item())

    @beartype
    def set_scale(self, scale: Real):
        with torch.no_grad():
            self.s.fill_(float(scale))
        self.clamp_()

    @beartype
    def clamp_(self):
        """Keep s > 0 after every update"""
        with torch.no_grad():
            self.s.clamp_(min=EPS_SCALE)

    @beartype
    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return FakeQuantFn.apply(v, self.s, self.scheme.T_s)

    def extra_repr(self) -> str:
        return f"T_s={self.scheme.T_s}, s={self.scale:.4g}"


@beartype
def _as64(v: TensorF32) -> torch.Tensor:
    return torch.from_numpy(v.data.astype(np.float64))


@beartype
def fq_forward(v: TensorF32, p: FakeQuantParam) -> TensorF32:
    return fake_quantize(v, p.scale, p.scheme)


@beartype
def fq_backward(v: TensorF32, p: FakeQuantParam, upstream: TensorF32) -> tuple[TensorF32, float]:
    """grad_v = upstream * [-T_s <= v/s <= T_s], grad_s = sum(upstream * dQ/ds)"""
    assert v.shape == upstream.shape, "upstream gradient must match the input"
    g = _as64(upstream)
    dq_dv, dq_ds = fq_partials(_as64(v), torch.tensor(p.scale, dtype=torch.float64),
                               p.scheme.T_s)
    return TensorF32((g * dq_dv).numpy()), float((g * dq_ds).sum())


@beartype
def noise_loss_values(v: torch.Tensor, s: torch.Tensor, t_s: int) -> torch.Tensor:
    return (fq_values(v, s, t_s) - v).pow(2).mean()


@beartype
def noise_grads_values(v: torch.Tensor,
                       s: torch.Tensor,
                       t_s: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form gradients of the mean squared quantization noise"""
    err = fq_values(v, s, t_s) - v
    dq_dv, dq_ds = fq_partials(v, s, t_s)
    coef = 2. / v.numel()
    return coef * err * (dq_dv - 1.), coef * (err * dq_ds).sum()


@beartype
def noise_loss(v: TensorF32, p: FakeQuantParam) -> float:
    """MSE between a tensor and its fake-quantized image"""
    assert len(v) > 0, "empty tensor"
    s = torch.tensor(p.scale, dtype=torch.float64)
    return float(noise_loss_values(_as64(v), s, p.scheme.T_s))


@beartype
def noise_grads(v: TensorF32, p: FakeQuantParam) -> tuple[TensorF32, float]:
    s = torch.tensor(p.scale, dtype=torch.float64)
    grad_v, grad_s = noise_grads_values(_as64(v), s, p.scheme.T_s)
    return TensorF32(grad_v.numpy()), float(grad_s)
