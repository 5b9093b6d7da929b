from collections import OrderedDict
from contextlib import contextmanager
from enum import Enum
from collections.abc import Iterator
from typing import Any, Optional

from beartype import beartype
import numpy as np
import torch
from torch import nn
from torch import autograd
from torch.nn import functional as ff
from torch.nn import grad as nn_grad

from helpers import logger
from helpers.errors import ShapeMismatchError
from kernels.tensor import TensorF32
from kernels.quantizer import QuantScheme, full_range_scheme, naive_scheme
from kernels.reference_conv import Conv1DLayer, check_geometry
from kernels.winograd import BASIS, PlanPath, plan_conv1d
from kernels.wino_int8 import check_overflow
from rsq.fake_quant import FakeQuantParam


@beartype
def log_module_info(model: nn.Module):

    def _fmt(n) -> str:
        if n // 10 ** 6 > 0:
            return f"{round(n / 10 ** 6, 2)} M"
        if n // 10 ** 3 > 0:
            return f"{round(n / 10 ** 3, 2)} k"
        return str(n)

    logger.debug("logging model specs")
    logger.debug(model)
    num_params = sum([p.numel() for p in model.parameters() if p.requires_grad])
    logger.info(f"total trainable params: {_fmt(num_params)}")


@beartype
def same_padding(k: int) -> tuple[int, int]:
    """Output width = input width at stride 1; even kernels pad one more on the right"""
    left = (k - 1) // 2
    return (left, k - 1 - left)


@beartype
def conv1d_grads(x: torch.Tensor,
                 w: torch.Tensor,
                 upstream: torch.Tensor,
                 stride: int,
                 padding: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Analytic gradients of the padded cross-correlation w.r.t. input, weights and bias"""
    xp = ff.pad(x, padding)
    grad_xp = nn_grad.conv1d_input(xp.shape, w, upstream, stride=stride)
    grad_w = nn_grad.conv1d_weight(xp, w.shape, upstream, stride=stride)
    grad_x = grad_xp[..., padding[0]:padding[0] + x.shape[-1]]
    return grad_x, grad_w, upstream.sum(dim=(0, 2))


@beartype
def conv1d_backward(x: TensorF32,
                    layer: Conv1DLayer,
                    upstream: TensorF32) -> tuple[TensorF32, TensorF32, np.ndarray]:
    w_out = check_geometry(x.shape, layer.weights.shape, layer.stride, layer.padding)
    expected = (x.shape[0], layer.c_out, w_out)
    if upstream.shape != expected:
        raise ShapeMismatchError(f"upstream gradient has shape {upstream.shape}, "
                                 f"the layer outputs {expected}")
    grad_x, grad_w, grad_b = conv1d_grads(
        torch.from_numpy(x.data.astype(np.float64)),
        torch.from_numpy(layer.weights.data.astype(np.float64)),
        torch.from_numpy(upstream.data.astype(np.float64)),
        layer.stride,
        layer.padding,
    )
    return TensorF32(grad_x.numpy()), TensorF32(grad_w.numpy()), grad_b.numpy()


class Conv1dFn(autograd.Function):
    """Padded Conv1D whose backward pass is `conv1d_grads`"""

    @staticmethod
    def forward(ctx: Any,
                x: torch.Tensor,
                w: torch.Tensor,
                b: torch.Tensor,
                stride: int,
                padding: tuple[int, int]) -> torch.Tensor:
        ctx.save_for_backward(x, w)
        ctx.stride, ctx.padding = stride, padding
        return ff.conv1d(ff.pad(x, padding), w, b, stride=stride)

    @staticmethod
    def backward(ctx: Any, upstream: torch.Tensor):
        x, w = ctx.saved_tensors
        grad_x, grad_w, grad_b = conv1d_grads(x, w, upstream.contiguous(), ctx.stride, ctx.padding)
        return grad_x, grad_w, grad_b, None, None


class QuantConv1d(nn.Module):

    @beartype
    def __init__(self,
                 weight: torch.Tensor,
                 bias: torch.Tensor,
                 *,
                 stride: int = 1,
                 padding: tuple[int, int] = (0, 0),
                 schemes: Optional[tuple[QuantScheme, QuantScheme]] = None):
        super().__init__()
        self.weight = nn.Parameter(weight.detach().clone().to(torch.float64))
        self.bias = nn.Parameter(bias.detach().clone().to(torch.float64))
        self.stride = stride
        self.padding = padding
        self.quantized = schemes is not None
        self.simulate = True  # switched off to read full-precision activations
        if schemes is not None:
            act_scheme, wt_scheme = schemes
            self.act_fq = FakeQuantParam(act_scheme)
            self.wt_fq = FakeQuantParam(wt_scheme)
        self.noise: Optional[torch.Tensor] = None

    @property
    def k(self) -> int:
        return self.weight.shape[-1]

    @property
    def schemes(self) -> tuple[QuantScheme, QuantScheme]:
        assert self.quantized, "full-precision layer"
        return self.act_fq.scheme, self.wt_fq.scheme

    @beartype
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.weight
        self.noise = None
        if self.quantized and self.simulate:
            x_fq, w_fq = self.act_fq(x), self.wt_fq(w)
            # quantization noise of both operands, mean squared error each
            self.noise = (x_fq - x).pow(2).mean() + (w_fq - w).pow(2).mean()
            x, w = x_fq, w_fq
        return Conv1dFn.apply(x, w, self.bias, self.stride, self.padding)

    def extra_repr(self) -> str:
        c_out, c_in, k = self.weight.shape
        return f"{c_in}, {c_out}, k={k}, stride={self.stride}, quantized={self.quantized}"


class ToyModel(nn.Module):
    """Conv1D stack with ReLU in between; the last layer stays in full precision"""

    @beartype
    def __init__(self, layers: list[QuantConv1d]):
        super().__init__()
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeMismatchError("layer channels do not chain")
        self.layers = nn.ModuleList(layers)

    @beartype
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ff.relu(x)
        return x

    def quantized_layers(self) -> list[tuple[int, QuantConv1d]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.quantized]

    def fake_quants(self) -> OrderedDict[str, FakeQuantParam]:
        out = OrderedDict()
        for i, layer in self.quantized_layers():
            out[f"layer{i}.act"] = layer.act_fq
            out[f"layer{i}.wt"] = layer.wt_fq
        return out

    def noise_loss(self) -> torch.Tensor:
        """Sum of the quantization noise terms of the last forward pass"""
        terms = [layer.noise for _, layer in self.quantized_layers() if layer.noise is not None]
        if not terms:
            return torch.zeros((), dtype=torch.float64)
        return torch.stack(terms).sum()

    def clamp_scales_(self):
        for fq in self.fake_quants().values():
            fq.clamp_()

    @contextmanager
    def full_precision(self) -> Iterator[None]:
        """Run the stack without fake quantization"""
        for layer in self.layers:
            layer.simulate = False
        try:
            yield
        finally:
            for layer in self.layers:
                layer.simulate = True


class RangePolicy(Enum):
    RANGE_SCALED = "range_scaled"  # overflow-free F(2,3) schemes
    FULL = "full"  # plain INT8 on both operands, shipped on the GEMM
    NAIVE = "naive"  # widest plain bit-widths that keep the transforms in storage


@beartype
def layer_schemes(k: int, stride: int, *,
                  policy: RangePolicy = RangePolicy.RANGE_SCALED
                  ) -> tuple[QuantScheme, QuantScheme]:
    """(activation, weight) schemes of one layer; non-Winograd layers stay on the full range"""
    full = full_range_scheme(8)
    if policy is RangePolicy.FULL:
        return full, full
    plan = plan_conv1d(k, stride)
    if policy is RangePolicy.NAIVE and plan.path is PlanPath.WINOGRAD:
        return (naive_scheme(full.T_s // BASIS.input_gain),
                naive_scheme(full.T_s // BASIS.weight_gain))
    return plan.act_scheme, plan.wt_scheme


@beartype
def build_teacher(channels: list[int],
                  kernels: list[int],
                  generator: torch.Generator) -> ToyModel:
    """FP32 reference stack, weights ~ N(0, 1 / fan_in) for unit-scale activations"""
    assert len(channels) == len(kernels) + 1, "one kernel size per layer"
    layers = []
    for c_in, c_out, k in zip(channels[:-1], channels[1:], kernels):
        std = (2. / (c_in * k)) ** 0.5
        w = torch.randn((c_out, c_in, k), generator=generator, dtype=torch.float64) * std
        b = torch.randn((c_out,), generator=generator, dtype=torch.float64) * 0.1
        layers.append(QuantConv1d(w, b, padding=same_padding(k)))
    return ToyModel(layers)


@beartype
def make_student(teacher: ToyModel, *,
                 policy: RangePolicy = RangePolicy.RANGE_SCALED) -> ToyModel:
    """Copy of the teacher with every layer but the last fake-quantized"""
    layers = []
    for i, layer in enumerate(teacher.layers):
        last = i == len(teacher.layers) - 1
        schemes = None if last else layer_schemes(layer.k, layer.stride, policy=policy)
        layers.append(QuantConv1d(layer.weight, layer.bias, stride=layer.stride,
                                  padding=layer.padding, schemes=schemes))
    for layer in layers:
        if (layer.quantized and policy is not RangePolicy.FULL
                and plan_conv1d(layer.k, layer.stride).path is PlanPath.WINOGRAD):
            assert check_overflow(*layer.schemes).ok, "Winograd layer schemes must not overflow"
    student = ToyModel(layers)
    log_module_info(student)
    return student
