import os
import subprocess
from pathlib import Path
from collections.abc import Callable
from typing import Any, Optional, Union

from beartype import beartype
import fire
from omegaconf import OmegaConf, DictConfig
import numpy as np
import torch

import orchestrator
from helpers import logger
from helpers.errors import DeploymentMismatchError, TrainingDivergedError, NumericError


THREADS_ENV: str = "WINOQ_THREADS"


@beartype
def get_name(command: str, seed: int) -> str:
    """Assemble the run name used for the log directory"""
    name = f"winoq.{command}"
    try:
        out = subprocess.check_output(["git", "rev-parse", "--short", "HEAD"],
                                      stderr=subprocess.DEVNULL)
        sha = out.strip().decode("ascii")
        name += f".gitSHA_{sha}"
    except (OSError, subprocess.CalledProcessError):
        pass
    name += f".seed{str(seed).zfill(2)}"
    return name


class WinoqRunner(object):

    DISABLE_LOGGER: bool = False

    @beartype
    def __init__(self,
                 cfg: str = "tasks/defaults/cpu.yml",  # relative to the project root
                 seed: Optional[int] = None,
                 k: Optional[int] = None,
                 stride: Optional[int] = None,
                 bits: Optional[int] = None,
                 act_T: Optional[int] = None,  # noqa: N803
                 act_alpha: Optional[Union[int, float]] = None,
                 wt_T: Optional[int] = None,  # noqa: N803
                 wt_alpha: Optional[Union[int, float]] = None,
                 c_in: Optional[int] = None,
                 c_out: Optional[int] = None,
                 width: Optional[int] = None,
                 batch: Optional[int] = None,
                 reps: Optional[int] = None,
                 warmup: Optional[int] = None,
                 threads: Optional[int] = None,
                 out: Optional[str] = None,
                 format: Optional[str] = None,  # noqa: A002
                 log_dir: Optional[str] = None,
                 wandb_project: Optional[str] = None,
                 wandb_mode: Optional[str] = None):

        logger.configure_default_logger()

        # retrieve config from filesystem
        proj_root = Path(__file__).resolve().parent
        _cfg = OmegaConf.load(proj_root / Path(cfg))
        assert isinstance(_cfg, DictConfig)
        self._cfg: DictConfig = _cfg  # for the type-checker

        # flags given in arg overwrite the cfg
        flags = {
            "seed": seed, "k": k, "stride": stride, "bits": bits,
            "act_T": act_T, "act_alpha": None if act_alpha is None else float(act_alpha),
            "wt_T": wt_T, "wt_alpha": None if wt_alpha is None else float(wt_alpha),
            "c_in": c_in, "c_out": c_out, "width": width, "batch": batch,
            "reps": reps, "warmup": warmup, "threads": threads,
            "out": out, "format": format, "log_dir": log_dir,
            "wandb_project": wandb_project, "wandb_mode": wandb_mode,
        }
        for key, val in flags.items():
            assert key in self._cfg, f"{key} missing from the cfg file"
            if val is not None:
                self._cfg[key] = val

        # the env var only stands in for a missing flag
        if threads is None and os.environ.get(THREADS_ENV):
            self._cfg.threads = int(os.environ[THREADS_ENV])

        self._cfg.root = str(proj_root)

        # set the cfg to read-only for safety
        OmegaConf.set_readonly(self._cfg, value=True)

    @beartype
    def _with_section(self, section: str, **overrides: Any) -> DictConfig:
        """Read-only copy of the cfg with the non-None overrides merged into one section"""
        given = {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in overrides.items() if v is not None}
        if not given:
            return self._cfg
        # merging needs a writable copy
        writable = OmegaConf.create(OmegaConf.to_container(self._cfg))
        cfg = OmegaConf.merge(writable, {section: given})
        assert isinstance(cfg, DictConfig)
        OmegaConf.set_readonly(cfg, value=True)
        return cfg

    @beartype
    def _run(self, command: str, workflow: Callable[[DictConfig], int], cfg: DictConfig):
        """Set up logging, run one workflow, and leave with its exit code"""
        np.set_printoptions(precision=4)

        if self.DISABLE_LOGGER:
            logger.set_level(logger.DISABLED)  # turn the logging off
        elif cfg.log_dir is not None:
            log_path = Path(cfg.log_dir) / get_name(command, int(cfg.seed))
            log_path.mkdir(parents=True, exist_ok=True)
            logger.configure(directory=log_path, format_strs=["stdout", "log", "json", "csv"])
            # config dump
            OmegaConf.save(config=cfg, f=(log_path / "cfg.yml"))

        logger.info(f"{command} with the config:")
        logger.info(OmegaConf.to_yaml(cfg))

        # seed
        torch.manual_seed(cfg.seed)

        try:
            code = workflow(cfg)
        except (DeploymentMismatchError, TrainingDivergedError, OverflowError,
                AssertionError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            code = orchestrator.EXIT_FAIL
        except (ValueError, IndexError, OSError, NumericError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            code = orchestrator.EXIT_USAGE
        finally:
            if cfg.log_dir is not None and not self.DISABLE_LOGGER:
                logger.Logger.CURRENT.close()
            logger.reset()
        raise SystemExit(code)

    @beartype
    def verify(self, cases: Optional[int] = None):
        cfg = self._with_section("verify", cases=cases)
        self._run("verify", orchestrator.verify, cfg)

    @beartype
    def overflow(self):
        self._run("overflow", orchestrator.overflow, self._cfg)

    @beartype
    def bench(self, preset: Optional[str] = None):
        cfg = self._with_section("bench", preset=preset)
        self._run("bench", orchestrator.bench, cfg)

    @beartype
    def calibrate(self, *paths: str, target: Optional[str] = None):
        cfg = self._with_section("calibrate", paths=paths or None, target=target)
        self._run("calibrate", orchestrator.calibrate, cfg)

    @beartype
    def gradcheck(self, points: Optional[int] = None, tol: Optional[float] = None):
        cfg = self._with_section("gradcheck", points=points, tol=tol)
        self._run("gradcheck", orchestrator.gradcheck, cfg)

    @beartype
    def train_demo(self,
                   seeds: Optional[Union[int, list[int], tuple[int, ...]]] = None,
                   modes: Optional[Union[str, list[str], tuple[str, ...]]] = None,
                   steps: Optional[int] = None,
                   beta: Optional[Union[int, float]] = None,
                   ckpt_dir: Optional[str] = None):
        cfg = self._with_section(
            "train",
            seeds=[seeds] if isinstance(seeds, int) else seeds,
            modes=[modes] if isinstance(modes, str) else modes,
            steps=steps,
            beta=None if beta is None else float(beta),
            ckpt_dir=ckpt_dir,
        )
        self._run("train-demo", orchestrator.train_demo, cfg)


if __name__ == "__main__":
    fire.Fire(WinoqRunner)
