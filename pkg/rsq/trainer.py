import json
import math
from enum import Enum
from pathlib import Path
from numbers import Real
from contextlib import contextmanager
from dataclasses import dataclass, field
from collections.abc import Callable, Iterator
from typing import Optional, Union

from beartype import beartype
import numpy as np
import torch
from torch.nn import functional as ff

from helpers import logger
from helpers.errors import DomainError, TrainingDivergedError, InvalidShapeError
from helpers.dataset import SyntheticBatches
from helpers.tensor_io import save_tensor, load_tensor
from kernels.tensor import TensorF32
from kernels.quantizer import DEFAULT_NUM_BINS, make_scheme, build_histogram_values, kl_calibrate
from rsq.nets import QuantConv1d, RangePolicy, ToyModel, make_student


class Mode(Enum):
    PTQ = "ptq"
    RSQ_NO_MSE = "rsq_nomse"
    RSQ = "rsq"
    PTQ_GEMM = "ptq_gemm"  # full-range INT8 schemes, no range scaling
    PTQ_6BIT = "ptq_6bit"  # plain 6-bit weights, the widest plain width F(2,3) tolerates

    @property
    def trains(self) -> bool:
        return self in {Mode.RSQ, Mode.RSQ_NO_MSE}

    @property
    def policy(self) -> RangePolicy:
        return {
            Mode.PTQ_GEMM: RangePolicy.FULL,
            Mode.PTQ_6BIT: RangePolicy.NAIVE,
        }.get(self, RangePolicy.RANGE_SCALED)


@dataclass(frozen=True)
class RSQConfig:
    beta: float = 0.25
    lr0: float = 0.005
    steps: int = 300
    decay_power: float = 1.
    batch: int = 16
    seed: int = 0
    mode: Mode = Mode.RSQ
    width: int = 64
    calib_batches: int = 4
    calib_std: float = 1.  # != 1 calibrates on a different input domain than fine-tuning
    heldout_batches: int = 4
    num_bins: int = DEFAULT_NUM_BINS
    log_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if not self.beta >= 0.:
            raise DomainError(f"beta must be >= 0, got {self.beta}")
        if not self.lr0 > 0.:
            raise DomainError(f"lr0 must be > 0, got {self.lr0}")
        if self.steps < 0 or self.batch < 1:
            raise DomainError(f"bad schedule: steps={self.steps}, batch={self.batch}")
        if not self.calib_std > 0. or self.threads < 1:
            raise DomainError(f"bad calibration std {self.calib_std} or threads {self.threads}")

    @property
    def effective_beta(self) -> float:
        """The noise loss only enters the objective of full RSQ"""
        return self.beta if self.mode is Mode.RSQ else 0.

    @property
    def effective_steps(self) -> int:
        return self.steps if self.mode.trains else 0


@beartype
def poly_lr(cfg: RSQConfig, step: int) -> float:
    """lr0 * (1 - step / steps) ^ power"""
    if cfg.steps == 0:
        return cfg.lr0
    if not 0 <= step <= cfg.steps:
        raise DomainError(f"step {step} outside the schedule [0, {cfg.steps}]")
    return cfg.lr0 * (1. - step / cfg.steps) ** cfg.decay_power


@dataclass
class RSQResult:
    student: ToyModel
    cfg: RSQConfig
    history: list[dict[str, float]] = field(default_factory=list)
    final_output_mse: float = math.nan
    scales: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, object]:
        return {
            "mode": self.cfg.mode.value,
            "seed": self.cfg.seed,
            "steps": self.cfg.effective_steps,
            "beta": self.cfg.effective_beta,
            "final_output_mse": self.final_output_mse,
            "scales": self.scales,
            "history": self.history,
        }


@beartype
def export_scales(model: ToyModel) -> dict[str, float]:
    return {name: fq.scale for name, fq in model.fake_quants().items()}


@beartype
def calibrate_scales(student: ToyModel, batches: list[torch.Tensor], num_bins: int):
    """KL-calibrate every activation and weight step size of the student"""
    seen: dict[int, list[np.ndarray]] = {i: [] for i, _ in student.quantized_layers()}

    def _recorder(i: int):
        def _hook(_module, args):
            seen[i].append(args[0].detach().numpy())
        return _hook

    handles = [layer.register_forward_pre_hook(_recorder(i))
               for i, layer in student.quantized_layers()]
    try:
        with torch.no_grad(), student.full_precision():
            for x in batches:
                student(x)
    finally:
        for handle in handles:
            handle.remove()

    for i, layer in student.quantized_layers():
        act_hist = build_histogram_values(np.concatenate(seen[i], axis=0), num_bins)
        layer.act_fq.set_scale(kl_calibrate(act_hist, layer.act_fq.scheme))
        wt_hist = build_histogram_values(layer.weight.detach().numpy(), num_bins)
        layer.wt_fq.set_scale(kl_calibrate(wt_hist, layer.wt_fq.scheme))
    logger.info(f"calibrated scales: {export_scales(student)}")


@beartype
def output_mse(student: ToyModel, teacher: ToyModel, batches: list[torch.Tensor]) -> float:
    """Fake-quant-simulated output MSE against the teacher, averaged over the batches"""
    with torch.no_grad():
        errs = [float(ff.mse_loss(student(x), teacher(x))) for x in batches]
    return float(np.mean(errs))


@contextmanager
def pinned_threads(num_threads: int) -> Iterator[None]:
    """Fix the torch intra-op thread count for the duration of a run, then restore it"""
    previous = torch.get_num_threads()
    torch.set_num_threads(num_threads)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


@beartype
def run_rsq_training(teacher: ToyModel,
                     cfg: RSQConfig,
                     *,
                     callback: Optional[Callable[[dict[str, float]], None]] = None) -> RSQResult:
    """Calibrate a quantized copy of the teacher, then fine-tune it by output distillation"""
    c_in = teacher.layers[0].weight.shape[1]

    def _batches(stream: str, std: float = 1.) -> SyntheticBatches:
        return SyntheticBatches(cfg.seed, stream, channels=c_in, width=cfg.width,
                                batch_size=cfg.batch, std=std)

    with pinned_threads(cfg.threads):
        student = make_student(teacher, policy=cfg.mode.policy)
        calibrate_scales(student, _batches("calib", cfg.calib_std).take(cfg.calib_batches),
                         cfg.num_bins)
        result = RSQResult(student=student, cfg=cfg)

        steps = cfg.effective_steps
        if steps > 0:
            _fine_tune(student, teacher, cfg, _batches("train"), result, callback)

        result.scales = export_scales(student)
        result.final_output_mse = output_mse(student, teacher,
                                             _batches("heldout").take(cfg.heldout_batches))
    logger.info(f"[{cfg.mode.value}|seed={cfg.seed}] final output mse: "
                f"{result.final_output_mse:.6g}")
    return result


@beartype
def _fine_tune(student: ToyModel,
               teacher: ToyModel,
               cfg: RSQConfig,
               train: SyntheticBatches,
               result: RSQResult,
               callback: Optional[Callable[[dict[str, float]], None]]):
    steps, beta = cfg.effective_steps, cfg.effective_beta
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: poly_lr(cfg, step) / cfg.lr0)
    for step in range(steps):
        x = train.sample()
        with torch.no_grad():
            target = teacher(x)
        task_loss = ff.mse_loss(student(x), target)
        noise = student.noise_loss()
        loss = task_loss + beta * noise
        row = {
            "step": step,
            "task_loss": task_loss.item(),
            "noise_loss": noise.item(),
            "lr": float(sched.get_last_lr()[0]),
        }
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(f"non-finite loss at step {step}: {row}",
                                        step=step, losses=row)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        student.clamp_scales_()
        result.history.append(row)
        if step % cfg.log_every == 0 or step == steps - 1:
            logger.logkvs(row)
            logger.dumpkvs()
        if callback is not None:
            callback(row)


MANIFEST: str = "manifest.json"


@beartype
def save_checkpoint(model: ToyModel, directory: Union[str, Path]):
    """Parameters in the tensor file format, layer geometry and scales in a manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.layers):
        weight_file, bias_file = f"layer{i}.weight.f32", f"layer{i}.bias.f32"
        save_tensor(directory / weight_file, TensorF32(layer.weight.detach().numpy()))
        save_tensor(directory / bias_file,
                    TensorF32(layer.bias.detach().numpy().reshape(1, 1, -1)))
        entry = {
            "name": f"layer{i}",
            "k": layer.k,
            "stride": layer.stride,
            "padding": list(layer.padding),
            "quantized": layer.quantized,
            "weight_file": weight_file,
            "bias_file": bias_file,
        }
        if layer.quantized:
            entry.update({
                "act_scheme": layer.act_fq.scheme.to_dict(),
                "wt_scheme": layer.wt_fq.scheme.to_dict(),
                "act_scale": layer.act_fq.scale,
                "wt_scale": layer.wt_fq.scale,
            })
        layers.append(entry)
    with (directory / MANIFEST).open("w") as f:
        json.dump({"layers": layers}, f, indent=2)
    logger.info(f"checkpoint saved @: {directory}")


@beartype
def _scheme_from_dict(d: dict[str, Real]):
    return make_scheme(int(d["bits"]), int(d["T"]), float(d["alpha"]))


@beartype
def load_checkpoint(directory: Union[str, Path]) -> ToyModel:
    directory = Path(directory)
    with (directory / MANIFEST).open("r") as f:
        manifest = json.load(f)
    layers = []
    for entry in manifest["layers"]:
        w = load_tensor(directory / entry["weight_file"])
        b = load_tensor(directory / entry["bias_file"])
        if not isinstance(w, TensorF32) or w.shape[-1] != entry["k"]:
            raise InvalidShapeError(f"{entry['name']}: weight file does not match the manifest")
        schemes = None
        if entry["quantized"]:
            schemes = (_scheme_from_dict(entry["act_scheme"]),
                       _scheme_from_dict(entry["wt_scheme"]))
        layer = QuantConv1d(torch.from_numpy(w.data.astype(np.float64)),
                            torch.from_numpy(b.data.astype(np.float64).reshape(-1)),
                            stride=int(entry["stride"]),
                            padding=(int(entry["padding"][0]), int(entry["padding"][1])),
                            schemes=schemes)
        if entry["quantized"]:
            layer.act_fq.set_scale(float(entry["act_scale"]))
            layer.wt_fq.set_scale(float(entry["wt_scale"]))
        layers.append(layer)
    return ToyModel(layers)
