import json
import math
import time
from pathlib import Path
from typing import Any, Optional
from contextlib import contextmanager

from beartype import beartype
from termcolor import colored
from omegaconf import OmegaConf, DictConfig
import wandb
import numpy as np

from helpers import logger
from helpers.errors import DomainError, DeploymentMismatchError
from helpers.dataset import SyntheticBatches, stream_generator
from helpers.tensor_io import load_tensor
from kernels.quantizer import QuantScheme, QuantizedTensor, make_scheme, naive_storage_bits
from kernels.quantizer import build_histogram, kl_search, minmax_scale
from kernels.tensor import TensorF32
from kernels.winograd import BASIS, PlanPath, plan_conv1d
from kernels.reference_conv import QuantConv1DLayer, conv1d_int8_gemm
from kernels.wino_int8 import check_overflow, conv1d_int8_winograd, extremal_transform_bounds
from kernels.bench import PROFILE_SHAPES, PROFILE_WIDTH, BenchShape, bench_kernel
from rsq.gradcheck import run_gradcheck
from rsq.nets import build_teacher
from rsq.trainer import Mode, RSQConfig, pinned_threads, run_rsq_training, save_checkpoint
from rsq.deploy import deploy_check


EXIT_OK: int = 0
EXIT_FAIL: int = 1
EXIT_USAGE: int = 2


@beartype
def status(ok: bool) -> str:
    if ok:
        return colored("PASS", "green", attrs=["bold"])
    return colored("FAIL", "red", attrs=["bold"])


@beartype
@contextmanager
def timed(op: str):
    logger.info(colored(f"starting timer | op: {op}", "magenta", attrs=["underline", "bold"]))
    tstart = time.perf_counter()
    yield
    logger.info(colored(f"stopping timer | op took {time.perf_counter() - tstart:.3f}secs",
                        "magenta"))


@beartype
def schemes_from_cfg(cfg: DictConfig) -> tuple[QuantScheme, QuantScheme]:
    act = make_scheme(int(cfg.bits), int(cfg.act_T), float(cfg.act_alpha))
    wt = make_scheme(int(cfg.bits), int(cfg.wt_T), float(cfg.wt_alpha))
    return act, wt


@beartype
def with_config(report: dict[str, Any], cfg: DictConfig) -> dict[str, Any]:
    """Every report carries the resolved config and the seed it ran with"""
    return {"seed": int(cfg.seed), **report, "config": OmegaConf.to_container(cfg)}


@beartype
def write_report(report: dict[str, Any], cfg: DictConfig, rows: Optional[list[dict]] = None):
    """JSON report, or CSV of `rows` when asked for; stdout when no path is given"""
    out = cfg.out
    if cfg.format == "csv" and rows is not None:
        if out is None:
            raise DomainError("csv reports need an output path")
        writer = logger.CSVOutputFormat(Path(out))
        for row in rows:
            writer.writekvs({k: v for k, v in row.items() if v is not None})
        writer.close()
    elif out is None:
        logger.info(json.dumps(report, indent=2, default=str))
        return
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with Path(out).open("w") as f:
            json.dump(report, f, indent=2, default=str)
    logger.info(f"report written @: {out}")


# verify

@beartype
def random_case(rng: np.random.Generator,
                k: int,
                act: QuantScheme,
                wt: QuantScheme,
                vcfg: DictConfig) -> tuple[QuantizedTensor, QuantConv1DLayer]:
    c_in = int(rng.integers(1, vcfg.max_channels + 1))
    c_out = int(rng.integers(1, vcfg.max_channels + 1))
    width = int(rng.integers(max(vcfg.min_width, k), vcfg.max_width + 1))
    x = rng.integers(-act.T_s, act.T_s + 1, size=(1, c_in, width))
    w = rng.integers(-wt.T_s, wt.T_s + 1, size=(c_out, c_in, k))
    x_q = QuantizedTensor(values=x.astype(act.storage_dtype), scale=1., scheme=act)
    w_q = QuantizedTensor(values=w.astype(wt.storage_dtype), scale=1., scheme=wt)
    return x_q, QuantConv1DLayer(weights=w_q)


@beartype
def verify(cfg: DictConfig) -> int:
    """Winograd raw2x against twice the INT8 GEMM raw output over a randomized k grid"""
    vcfg = cfg.verify
    act, wt = schemes_from_cfg(cfg)
    rng = np.random.default_rng(cfg.seed)
    grid = [int(k) for k in vcfg.k_grid]
    per_k = {k: {"cases": 0, "exact": 0, "path": None} for k in grid}
    first_divergence = None

    with timed("verify"):
        for case in range(int(vcfg.cases)):
            k = grid[case % len(grid)]
            plan = plan_conv1d(k, 1, act, wt)
            per_k[k]["path"] = plan.path.value
            per_k[k]["cases"] += 1
            if plan.path is not PlanPath.WINOGRAD:
                # nothing to compare: the plain path is the GEMM itself
                per_k[k]["exact"] += 1
                logger.debug(f"case {case}: k={k} plain_int8")
                continue
            x_q, layer_q = random_case(rng, k, act, wt, vcfg)
            raw_gemm, _ = conv1d_int8_gemm(x_q, layer_q)
            # verify pins the operator to one thread
            raw2x, _ = conv1d_int8_winograd(x_q, layer_q, plan, threads=1)
            expected = 2 * raw_gemm.data.astype(np.int64)
            got = raw2x.data.astype(np.int64)
            exact = np.array_equal(got, expected) and not (got % 2).any()
            per_k[k]["exact"] += int(exact)
            logger.debug(f"case {case}: k={k} shape={x_q.shape} {status(exact)}")
            if not exact and first_divergence is None:
                bad = (got != expected) | (got % 2 != 0)
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                first_divergence = {
                    "case": case,
                    "k": k,
                    "input_shape": list(x_q.shape),
                    "weight_shape": list(layer_q.weights.shape),
                    "index": list(idx),
                    "expected": int(expected[idx]),
                    "got": int(got[idx]),
                    "remainder": list(plan.remainder),
                }

    for k, row in per_k.items():
        logger.logkvs({"k": k, "path": str(row["path"]), "cases": row["cases"],
                       "exact": row["exact"], "status": "ok" if row["exact"] == row["cases"]
                       else "MISMATCH"})
        logger.dumpkvs()
    ok = first_divergence is None
    if not ok:
        logger.error(f"first divergence: {json.dumps(first_divergence)}")
    logger.info(f"verify: {status(ok)}")
    write_report(with_config({"ok": ok, "per_k": {str(k): v for k, v in per_k.items()},
                              "first_divergence": first_divergence}, cfg),
                 cfg, rows=[{"k": k, **v} for k, v in per_k.items()])
    return EXIT_OK if ok else EXIT_FAIL


# overflow

@beartype
def overflow(cfg: DictConfig) -> int:
    act, wt = schemes_from_cfg(cfg)
    report = check_overflow(act, wt)
    ext_act, ext_wt = extremal_transform_bounds(act, wt)
    # what a plain symmetric quantizer would need to stay overflow-free
    naive_act = naive_storage_bits(report.storage_limit // BASIS.input_gain)
    naive_wt = naive_storage_bits(report.storage_limit // BASIS.weight_gain)
    logger.logkvs({
        "act T_s": act.T_s,
        "wt T_s": wt.T_s,
        "max |2 D_Q|": report.max_transformed_act,
        "max |3 G_Q|": report.max_transformed_wt,
        "storage limit": report.storage_limit,
        "fits act": str(report.fits_act),
        "fits wt": str(report.fits_wt),
        "naive act bits": naive_act,
        "naive wt bits": naive_wt,
    })
    logger.dumpkvs()
    logger.info(f"overflow: {status(report.ok)}")
    write_report(with_config({
        **report.to_dict(),
        "extremal": {"act": ext_act, "wt": ext_wt},
        "act_scheme": act.to_dict(),
        "wt_scheme": wt.to_dict(),
        "naive_bits": {"act": naive_act, "wt": naive_wt,
                       "act_range": 2 ** (naive_act - 1) - 1,
                       "wt_range": 2 ** (naive_wt - 1) - 1},
    }, cfg), cfg)
    return EXIT_OK if report.ok else EXIT_FAIL


# bench

@beartype
def bench_shapes(cfg: DictConfig) -> list[tuple[int, int, BenchShape]]:
    shape = BenchShape(int(cfg.c_in), int(cfg.c_out), int(cfg.width), int(cfg.batch))
    match cfg.bench.preset:
        case "single":
            return [(int(cfg.k), int(cfg.stride), shape)]
        case "sweep":
            return [(k, int(cfg.stride), shape)
                    for k in range(int(cfg.bench.k_min), int(cfg.bench.k_max) + 1)]
        case "profile":
            return [(k, s, BenchShape(c_in, c_out, PROFILE_WIDTH, int(cfg.batch)))
                    for (k, s, c_in, c_out) in PROFILE_SHAPES]
        case _:
            raise DomainError(f"unknown bench preset: {cfg.bench.preset}")


@beartype
def bench(cfg: DictConfig) -> int:
    act, wt = schemes_from_cfg(cfg)
    rows = []
    with timed(f"bench ({cfg.bench.preset})"):
        for k, stride, shape in bench_shapes(cfg):
            plan = plan_conv1d(k, stride, act, wt)
            if plan.path is not PlanPath.WINOGRAD:
                logger.warn(f"k={k}, stride={stride} runs on the plain INT8 path: skipped")
                continue
            result = bench_kernel(plan, shape, int(cfg.reps), warmup=int(cfg.warmup),
                                  seed=int(cfg.seed), threads=int(cfg.threads))
            row = result.to_dict()
            rows.append(row)
            logger.logkvs(row)
            logger.dumpkvs()
            if result.wino_ns > result.gemm_ns:
                logger.warn(f"k={k}: measured Winograd slower than GEMM (informative only)")
    write_report(with_config({"rows": rows}, cfg), cfg, rows=rows)
    return EXIT_OK


# calibrate

@beartype
def calibrate(cfg: DictConfig) -> int:
    ccfg = cfg.calibrate
    paths = [ccfg.paths] if isinstance(ccfg.paths, str) else list(ccfg.paths)
    if not paths:
        raise DomainError("no tensor files to calibrate")
    act, wt = schemes_from_cfg(cfg)
    scheme = {"act": act, "wt": wt}.get(ccfg.target)
    if scheme is None:
        raise DomainError(f"calibration target must be act or wt, got {ccfg.target}")
    num_bins = int(ccfg.num_bins)
    records = []
    for path in paths:
        v = TensorF32(load_tensor(path).data.astype(np.float32))
        search = kl_search(build_histogram(v, num_bins), scheme)
        base = {"tensor": str(path), "T_s": scheme.T_s, "alpha": scheme.alpha, "bins": num_bins}
        # fallback: KL degenerated to max|x| / T_s, or min-max saw an all-zero tensor
        records.append({**base, "method": "kl", "scale": search.scale,
                        "fallback": search.degenerate})
        records.append({**base, "method": "minmax", "scale": minmax_scale(v, scheme),
                        "fallback": not np.abs(v.data).max() > 0.})
        logger.logkvs({"tensor": str(path), "kl": search.scale,
                       "kl threshold": search.threshold, "minmax": records[-1]["scale"],
                       "fallback": str(search.degenerate)})
        logger.dumpkvs()
    write_report(with_config({"target": ccfg.target, "records": records}, cfg),
                 cfg, rows=records)
    return EXIT_OK


# gradcheck

@beartype
def gradcheck(cfg: DictConfig) -> int:
    gcfg = cfg.gradcheck
    act, wt = schemes_from_cfg(cfg)
    reports = {}
    for name, scheme in (("act", act), ("wt", wt)):
        with timed(f"gradcheck ({name}, T_s={scheme.T_s})"):
            reports[name] = run_gradcheck(t_s=scheme.T_s,
                                          num_points=int(gcfg.points),
                                          num_sign_points=int(gcfg.sign_points),
                                          tol=float(gcfg.tol),
                                          seed=int(cfg.seed))
        logger.info(f"{name}: {status(reports[name].ok)} "
                    f"(max rel err {reports[name].max_rel_err})")
    ok = all(r.ok for r in reports.values())
    write_report(with_config({"ok": ok, **{k: r.to_dict() for k, r in reports.items()}}, cfg),
                 cfg)
    return EXIT_OK if ok else EXIT_FAIL


# train-demo

@beartype
def rsq_config(tcfg: DictConfig, mode: Mode, seed: int) -> RSQConfig:
    return RSQConfig(
        beta=float(tcfg.beta),
        lr0=float(tcfg.lr0),
        steps=int(tcfg.steps),
        decay_power=float(tcfg.decay_power),
        batch=int(tcfg.batch),
        seed=seed,
        mode=mode,
        width=int(tcfg.width),
        calib_batches=int(tcfg.calib_batches),
        calib_std=float(tcfg.calib_std),
        heldout_batches=int(tcfg.heldout_batches),
        num_bins=int(tcfg.num_bins),
        log_every=int(tcfg.log_every),
    )


@beartype
def ordering_verdicts(medians: dict[str, float],
                      per_seed: dict[str, list[float]],
                      min_strict_wins: float) -> dict[str, bool]:
    """Pairwise verdicts over the modes that ran"""
    verdicts = {}
    rsq, nomse, ptq = Mode.RSQ.value, Mode.RSQ_NO_MSE.value, Mode.PTQ.value
    if rsq in medians and nomse in medians:
        verdicts["rsq<=rsq_nomse"] = medians[rsq] <= medians[nomse]
    if nomse in medians and ptq in medians:
        verdicts["rsq_nomse<=ptq"] = medians[nomse] <= medians[ptq]
    if rsq in per_seed and ptq in per_seed:
        wins = sum(a < b for a, b in zip(per_seed[rsq], per_seed[ptq]))
        needed = math.ceil(min_strict_wins * len(per_seed[rsq]))
        verdicts[f"rsq<ptq in >={needed}/{len(per_seed[rsq])} seeds"] = wins >= needed
    return verdicts


@beartype
def train_demo(cfg: DictConfig) -> int:
    tcfg = cfg.train
    seeds = [int(s) for s in tcfg.seeds]
    modes = [Mode(m) for m in tcfg.modes]
    if len(seeds) < 2:  # noqa: PLR2004
        logger.warn(f"only {len(seeds)} seed(s): the ordering verdicts are low-confidence")

    use_wandb = cfg.wandb_mode != "disabled"
    if use_wandb:
        wandb.init(project=cfg.wandb_project, mode=cfg.wandb_mode,
                   config=OmegaConf.to_container(cfg))

    per_seed: dict[str, list[float]] = {m.value: [] for m in modes}
    runs, rsq_students = [], {}
    for seed in seeds:
        teacher = build_teacher([int(c) for c in tcfg.channels],
                                [int(k) for k in tcfg.kernels],
                                stream_generator(seed, "teacher"))
        for mode in modes:
            rcfg = rsq_config(tcfg, mode, seed)

            def _to_dash(row: dict[str, float], mode=mode, seed=seed):
                wandb.log({f"{mode.value}/seed{seed}/{k}": v for k, v in row.items()})

            with timed(f"{mode.value} | seed {seed}"):
                result = run_rsq_training(teacher, rcfg, callback=_to_dash if use_wandb else None)
            per_seed[mode.value].append(result.final_output_mse)
            runs.append(result.to_dict())
            if mode is Mode.RSQ:
                rsq_students[seed] = result.student

    medians = {m: float(np.median(v)) for m, v in per_seed.items()}
    verdicts = ordering_verdicts(medians, per_seed, float(tcfg.min_strict_wins))
    for m, med in medians.items():
        logger.logkv(f"median {m}", med)
    logger.dumpkvs()
    for name, ok in verdicts.items():
        logger.info(f"{name}: {status(ok)}")

    deploy = None
    if rsq_students:
        seed = seeds[0]
        student = rsq_students[seed]
        c_in = student.layers[0].weight.shape[1]
        batch = SyntheticBatches(seed, "heldout", channels=c_in, width=int(tcfg.width),
                                 batch_size=int(tcfg.batch)).sample()
        try:
            with pinned_threads(1):
                deploy = deploy_check(student, batch, threads=int(cfg.threads)).to_dict()
        except DeploymentMismatchError as e:
            logger.error(str(e))
            deploy = {"ok": False, "max_divergence": e.max_divergence,
                      "location": list(e.location)}
        logger.info(f"deploy check: {status(bool(deploy['ok']))}")
        if tcfg.ckpt_dir is not None:
            save_checkpoint(student, Path(tcfg.ckpt_dir))

    if use_wandb:
        wandb.finish()

    ok = all(verdicts.values()) and (deploy is None or bool(deploy["ok"]))
    summary = {
        "medians": medians,
        "verdicts": verdicts,
        "deploy_check": deploy,
        "ok": ok,
    }
    for mode in (Mode.PTQ_GEMM, Mode.PTQ_6BIT):  # informative, no verdict
        if mode.value in medians:
            summary[f"{mode.value}_median"] = medians[mode.value]
    write_report(with_config({"summary": summary, "runs": runs}, cfg), cfg,
                 rows=[{k: v for k, v in run.items() if k not in {"history", "scales"}}
                       for run in runs])
    return EXIT_OK if ok else EXIT_FAIL
