from dataclasses import dataclass, field
from collections.abc import Callable

from beartype import beartype
import numpy as np
import torch

from helpers import logger
from helpers.math_util import rel_err
from rsq.fake_quant import fq_partials, noise_grads_values, round_half_away


KINK_MARGIN: float = 0.05  # distance kept from rounding and clipping kinks, in grid units
FD_STEP: float = 1e-6  # relative central-difference step


@dataclass
class GradcheckReport:
    num_points: int
    num_sign_points: int
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    failures: list[dict[str, object]] = field(default_factory=list)
    sign_violations: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures and self.sign_violations == 0

    def to_dict(self) -> dict[str, object]:
        return {
            "num_points": self.num_points,
            "num_sign_points": self.num_sign_points,
            "tol": self.tol,
            "max_rel_err": self.max_rel_err,
            "num_failures": len(self.failures),
            "failures": self.failures[:20],
            "sign_violations": self.sign_violations,
            "ok": self.ok,
        }


@beartype
def sample_points(num: int, t_s: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(v, s) pairs with v/s away from the rounding and clipping kinks"""
    vs, ss = [], []
    while len(vs) < num:
        s = float(np.exp(rng.uniform(np.log(1e-3), np.log(1.))))
        r = float(rng.uniform(-1.5 * t_s, 1.5 * t_s))
        frac = abs(r) - np.floor(abs(r))
        if abs(frac - 0.5) <= KINK_MARGIN or abs(abs(r) - t_s) <= KINK_MARGIN:
            continue
        vs.append(r * s)
        ss.append(s)
    return np.array(vs), np.array(ss)


@beartype
def surrogate(v: float, s: float, t_s: int, c: float) -> float:
    """Straight-through surrogate of Q: the rounding residual `c` is frozen"""
    return s * (float(np.clip(v / s, -t_s, t_s)) + c)


@beartype
def central_diff(fn: Callable[[float], float], x: float) -> float:
    h = FD_STEP * max(abs(x), 1e-3)
    return (fn(x + h) - fn(x - h)) / (2. * h)


@beartype
def check_point(v: float, s: float, t_s: int) -> dict[str, tuple[float, float]]:
    """Analytic vs finite-difference pairs for one (v, s), in float64"""
    r = np.clip(v / s, -t_s, t_s)
    c = float(round_half_away(torch.tensor(r, dtype=torch.float64)) - r)

    def q(v_, s_):
        return surrogate(v_, s_, t_s, c)

    def lq(v_, s_):
        return (q(v_, s_) - v_) ** 2

    v64 = torch.tensor([v], dtype=torch.float64)
    s64 = torch.tensor(s, dtype=torch.float64)
    dq_dv, dq_ds = fq_partials(v64, s64, t_s)
    dl_dv, dl_ds = noise_grads_values(v64, s64, t_s)
    return {
        "dq_dv": (float(dq_dv[0]), central_diff(lambda x: q(x, s), v)),
        "dq_ds": (float(dq_ds[0]), central_diff(lambda x: q(v, x), s)),
        "dlq_dv": (float(dl_dv[0]), central_diff(lambda x: lq(x, s), v)),
        "dlq_ds": (float(dl_ds), central_diff(lambda x: lq(v, x), s)),
    }


@beartype
def count_sign_violations(num: int, t_s: int, rng: np.random.Generator) -> int:
    """Noise-loss gradient must be 0 inside [-s T_s, s T_s], > 0 above, < 0 below"""
    s = torch.from_numpy(np.exp(rng.uniform(np.log(1e-3), np.log(1.), size=num)))
    v = torch.from_numpy(rng.uniform(-2. * t_s, 2. * t_s, size=num)) * s
    # element-wise signs do not depend on the 2/N normalization
    g, _ = noise_grads_values(v, s, t_s)
    r = v / s
    above, below = r > t_s, r < -t_s
    inside = ~(above | below)
    return int(((above & (g <= 0)) | (below & (g >= 0)) | (inside & (g != 0))).sum())


@beartype
def run_gradcheck(*,
                  t_s: int,
                  num_points: int = 1000,
                  num_sign_points: int = 10_000,
                  tol: float = 1e-4,
                  seed: int = 0) -> GradcheckReport:
    """Straight-through gradients of Q and of the noise loss against central differences"""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(num_points=num_points, num_sign_points=num_sign_points, tol=tol)
    vs, ss = sample_points(num_points, t_s, rng)
    for v, s in zip(vs, ss):
        for name, (analytic, numeric) in check_point(float(v), float(s), t_s).items():
            err = rel_err(analytic, numeric)
            report.max_rel_err[name] = max(report.max_rel_err.get(name, 0.), err)
            if err >= tol:
                report.failures.append({"grad": name, "v": float(v), "s": float(s),
                                        "analytic": analytic, "numeric": numeric, "rel_err": err})
    report.sign_violations = count_sign_violations(num_sign_points, t_s, rng)
    logger.info(f"gradcheck: {num_points} points, {len(report.failures)} failures, "
                f"{report.sign_violations} sign violations")
    return report
