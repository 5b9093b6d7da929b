from dataclasses import dataclass, field
from typing import Optional

from beartype import beartype
import numpy as np
import torch
from torch.nn import functional as ff

from helpers import logger
from helpers.errors import DeploymentMismatchError
from kernels.tensor import TensorF32
from kernels.quantizer import quantize_values
from kernels.winograd import PlanPath, plan_conv1d
from kernels.reference_conv import Conv1DLayer, QuantConv1DLayer, conv1d_f32_direct
from kernels.reference_conv import conv1d_int8_gemm
from kernels.wino_int8 import check_overflow, conv1d_int8_winograd
from rsq.nets import QuantConv1d, ToyModel
from rsq.trainer import export_scales


DEFAULT_TOL: float = 1e-4


@dataclass
class DeployReport:
    tol: float
    layers: list[dict[str, object]] = field(default_factory=list)

    @property
    def max_divergence(self) -> float:
        return max((float(e["max_rel_divergence"]) for e in self.layers), default=0.)

    @property
    def ok(self) -> bool:
        return self.max_divergence <= self.tol

    def to_dict(self) -> dict[str, object]:
        return {"tol": self.tol, "max_divergence": self.max_divergence, "ok": self.ok,
                "layers": self.layers}


@beartype
def run_deployed_layer(layer: QuantConv1d,
                       x: torch.Tensor,
                       scales: Optional[tuple[float, float]],
                       threads: int) -> tuple[np.ndarray, str]:
    """One layer through the integer operator it would ship with, or FP32 if unquantized"""
    w = layer.weight.detach().numpy()
    bias = layer.bias.detach().numpy()
    if scales is None:
        fp = Conv1DLayer(weights=TensorF32(w), bias=bias, stride=layer.stride,
                         padding=layer.padding)
        return conv1d_f32_direct(TensorF32(x.numpy()), fp).data, "fp32"
    act_scheme, wt_scheme = layer.schemes
    x_q = quantize_values(x.numpy(), scales[0], act_scheme)
    w_q = quantize_values(w, scales[1], wt_scheme)
    layer_q = QuantConv1DLayer(weights=w_q, bias=bias, stride=layer.stride,
                               padding=layer.padding)
    plan = plan_conv1d(layer.k, layer.stride, act_scheme, wt_scheme)
    if plan.path is PlanPath.WINOGRAD and check_overflow(act_scheme, wt_scheme).ok:
        _, deq = conv1d_int8_winograd(x_q, layer_q, plan, threads=threads)
        return deq.data, PlanPath.WINOGRAD.value
    _, deq = conv1d_int8_gemm(x_q, layer_q, threads=threads)
    return deq.data, PlanPath.PLAIN_INT8.value


@beartype
def deploy_check(student: ToyModel,
                 batch: torch.Tensor,
                 *,
                 scales: Optional[dict[str, float]] = None,
                 tol: float = DEFAULT_TOL,
                 threads: int = 1) -> DeployReport:
    """Compare every layer of the fake-quant simulation with its integer deployment.
    Each layer is fed the simulated input, so divergences do not compound.
    """
    scales = export_scales(student) if scales is None else scales
    report = DeployReport(tol=tol)
    x = batch.to(torch.float64)
    with torch.no_grad():
        for i, layer in enumerate(student.layers):
            sim = layer(x)
            pair = (scales[f"layer{i}.act"], scales[f"layer{i}.wt"]) if layer.quantized else None
            deployed, path = run_deployed_layer(layer, x, pair, threads)
            sim_np = sim.numpy()
            diff = np.abs(deployed.astype(np.float64) - sim_np)
            rel = float(diff.max() / max(float(np.abs(sim_np).max()), 1e-12))
            location = tuple(int(j) for j in np.unravel_index(int(diff.argmax()), diff.shape))
            report.layers.append({"name": f"layer{i}", "path": path,
                                  "max_rel_divergence": rel, "location": list(location)})
            logger.debug(f"layer{i} [{path}]: max rel divergence {rel:.3g} @ {location}")
            if rel > tol:
                raise DeploymentMismatchError(
                    f"layer{i} [{path}] diverges from the simulation by {rel:.3g} "
                    f"(tol {tol}) at {location}",
                    max_divergence=rel,
                    location=(i, *location),
                )
            x = ff.relu(sim) if i < len(student.layers) - 1 else sim
    logger.info(f"deploy check passed, max divergence {report.max_divergence:.3g}")
    return report
