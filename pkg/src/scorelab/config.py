"""Experiment configuration: TOML files validated with pydantic."""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional, Union

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .score_oracle import (ScoreOracle, make_bump_oracle, make_exact_oracle, make_l2_badset_oracle,
                           make_linf_oracle)
from .sde_models import DiffusionModel, DiffusionSchedule
from .targets import BumpTarget, GaussianMixture

KINDS = ("lmc", "anneal", "predictor", "pc", "coupled", "counterexample", "bounds", "schedule")


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending location."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TargetSpec(_Strict):
    kind: Literal["gaussian_mixture", "bump"] = "gaussian_mixture"
    weights: list[float] = [1.0]
    means: list[list[float]] = [[0.0]]
    variances: list[float] = [1.0]
    c_ls: Optional[float] = Field(None, gt=0)
    L: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "bump" and self.L is None:
            raise ValueError("bump target needs L")
        if self.kind == "gaussian_mixture":
            if not (len(self.weights) == len(self.means) == len(self.variances)):
                raise ValueError("weights, means and variances must have the same length")
            if len({len(m) for m in self.means}) != 1:
                raise ValueError("all means must have the same dimension")
        return self

    def build(self):
        if self.kind == "bump":
            return BumpTarget(self.L)
        return GaussianMixture(self.weights, self.means, self.variances)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "bump" else len(self.means[0])


class ScheduleSpec(_Strict):
    kind: Literal["constant", "exponential", "affine_sq"] = "constant"
    c: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    alpha: Optional[float] = None

    def build(self) -> DiffusionSchedule:
        if self.kind == "constant":
            return DiffusionSchedule.constant(1.0 if self.c is None else self.c)
        if self.kind == "exponential":
            return DiffusionSchedule.exponential(self.a, self.b)
        return DiffusionSchedule.affine_sq(self.b, self.alpha)


class ModelSpec(_Strict):
    family: Literal["SMLD", "DDPM"] = "DDPM"
    horizon: float = Field(1.0, ge=0)
    schedule: ScheduleSpec = ScheduleSpec()

    def build(self) -> DiffusionModel:
        return DiffusionModel(self.family, self.schedule.build(), self.horizon)


class OracleSpec(_Strict):
    mode: Literal["exact", "linf_perturbed", "l2_badset", "bump_mismatch"] = "exact"
    eps: Optional[float] = Field(None, ge=0)
    eps1: Optional[float] = Field(None, ge=0)
    seed: int = 0
    shape: Literal["constant", "constant_rotation", "smooth_field"] = "constant"
    direction: Optional[list[float]] = None
    L: Optional[float] = Field(None, gt=0)
    center: Optional[list[float]] = None
    radius: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "linf_perturbed" and self.eps1 is None:
            raise ValueError("linf_perturbed oracle needs eps1")
        if self.mode == "l2_badset" and (self.eps is None or self.center is None or self.radius is None):
            raise ValueError("l2_badset oracle needs eps, center and radius")
        if self.mode == "bump_mismatch" and self.L is None:
            raise ValueError("bump_mismatch oracle needs L")
        return self

    def build(self, target, model: Optional[DiffusionModel]) -> ScoreOracle:
        if self.mode == "bump_mismatch":
            return make_bump_oracle(self.L)
        if not isinstance(target, GaussianMixture):
            raise ConfigError("oracle: only bump_mismatch oracles work with a bump target")
        if self.mode == "exact":
            return make_exact_oracle(target, model)
        if self.mode == "linf_perturbed":
            return make_linf_oracle(target, model, self.eps1, self.shape, self.seed, self.direction)
        return make_l2_badset_oracle(target, self.eps, self.center, self.radius, model, self.direction)


class InitialSpec(_Strict):
    kind: Literal["gaussian", "point", "prior"] = "gaussian"
    mean: list[float] = [0.0]
    var: float = Field(1.0, gt=0)
    value: list[float] = [0.0]


class CorrectorSpec(_Strict):
    plan: Literal["none", "every", "final_only"] = "none"
    num_steps: int = Field(0, ge=0)
    step_size: float = Field(0.01, gt=0)


class AnnealSpec(_Strict):
    sigma_min: float = Field(0.1, gt=0)
    c: float = Field(1.0, gt=0)
    c_h: float = Field(1.0, gt=0)
    c_T: float = Field(1.0, gt=0)
    eps_tv: float = Field(0.1, gt=0, lt=1)
    step_size: Optional[float] = Field(None, gt=0)
    num_steps: Optional[int] = Field(None, ge=0)
    baseline_start: Optional[list[float]] = None


class SamplerSpec(_Strict):
    step_size: float = Field(0.01, gt=0)
    num_steps: int = Field(100, ge=0)
    chains: int = Field(1000, ge=1)
    initial: InitialSpec = InitialSpec()
    snapshot_times: list[float] = []
    corrector: CorrectorSpec = CorrectorSpec()
    anneal: AnnealSpec = AnnealSpec()


class MeasureSpec(_Strict):
    suite: list[Literal["moments", "hist_tv", "modes"]] = ["moments", "hist_tv", "modes"]
    reference: Literal["auto", "target", "oracle_reference"] = "auto"


class BoundsSpec(_Strict):
    theorem: Literal["lmc", "predictor", "framework", "warm_start", "perturbation", "budget",
                     "constants", "gaussian_chi2"] = "lmc"
    chi0: float = Field(0.0, ge=0)
    params: dict[str, Union[float, int, str]] = {}
    D: list[float] = []
    delta: list[float] = []


class CounterexampleSpec(_Strict):
    Ls: list[float] = [4.0, 6.0, 8.0, 10.0]


class CouplingSpec(_Strict):
    eps1: float = Field(0.5, gt=0)
    grid_points: int = Field(2049, ge=65)
    grid_lo: float = -12.0
    grid_hi: Optional[float] = None


class ScheduleCmdSpec(_Strict):
    d: int = Field(1, ge=1)
    sigma_min: float = Field(1.0, gt=0)
    C_LS: float = Field(1.0, gt=0)
    M1: float = Field(0.0, ge=0)
    eps_tv: float = Field(0.1, gt=0, lt=1)
    c: float = Field(1.0, gt=0)
    L: float = Field(1.0, gt=0)


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]
    seed: int = 0
    output_dir: str = "runs/out"
    target: TargetSpec = TargetSpec()
    model: ModelSpec = ModelSpec()
    oracle: OracleSpec = OracleSpec()
    sampler: SamplerSpec = SamplerSpec()
    measure: MeasureSpec = MeasureSpec()
    bounds: BoundsSpec = BoundsSpec()
    counterexample: CounterexampleSpec = CounterexampleSpec()
    coupling: CouplingSpec = CouplingSpec()
    schedule: ScheduleCmdSpec = ScheduleCmdSpec()

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("predictor", "pc"):
            s = self.sampler
            if s.step_size * s.num_steps > self.model.horizon * (1 + 1e-9):
                raise ValueError("sampler.step_size * sampler.num_steps exceeds model.horizon")
        return self


def _location(err) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = [f"{_location(e)}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("; ".join(msgs)) from None


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax: {exc}") from None
    return parse_config(data)


def load(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.model_dump(exclude_none=True))
