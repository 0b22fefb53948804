"""YAML run configuration validated against a pydantic schema.

Example::

    scenario:
      id: 2
      kind: binary
      n_subjects: 2000
      missingness: standard30
    study:
      n_reps: 200
      m: 5
      methods: [complete_data, approx, tve_approx]
      base_seed: 7
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .sim import METHODS, ScenarioConfig


class ConfigError(ValueError):
    """Schema violation; the message lists every offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioSection(_Strict):
    id: Literal[1, 2, 3, 4, 5] = 1
    kind: Literal["binary", "continuous"] = "binary"
    n_subjects: int = Field(2000, ge=10)
    lambda_E: Optional[float] = Field(None, gt=0)
    lambda_C: Optional[float] = Field(None, gt=0)
    admin_censor: float = Field(10.0, gt=0)
    missingness: Literal["standard30", "outcome_dependent", "low10", "none"] = "standard30"
    event_frac: float = Field(0.10, gt=0, lt=1)
    dropout_frac: float = Field(0.50, gt=0, lt=1)


class StudySection(_Strict):
    n_reps: int = Field(500, ge=1)
    m: int = Field(10, ge=2)
    methods: list[str] = Field(default_factory=lambda: list(METHODS))
    base_seed: int = Field(1, ge=0)
    fcs_iterations: int = Field(10, ge=1)
    rejection_cap: int = Field(20000, ge=1)
    smc_event_hazard: Literal["increment", "cumulative"] = "increment"
    include_h1: bool = False
    include_interactions: bool = False
    alpha: float = Field(0.05, gt=0, lt=1)
    wald: Literal["chisq", "d1"] = "chisq"
    eval_times: list[float] = Field(default_factory=lambda: [1.0, 5.0, 9.0])
    curve_step: float = Field(0.1, gt=0)
    workers: Optional[int] = Field(None, ge=1)
    calibration_file: Optional[str] = None

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if not v:
            raise ValueError("at least one method required")
        return v


class RunConfig(_Strict):
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    study: StudySection = Field(default_factory=StudySection)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "WARNING"

    def scenario_config(self) -> ScenarioConfig:
        s, st = self.scenario, self.study
        return ScenarioConfig(
            scenario_id=s.id, covariate_kind=s.kind, n_subjects=s.n_subjects, lambda_E=s.lambda_E,
            lambda_C=s.lambda_C, admin_censor=s.admin_censor, missingness=s.missingness, n_reps=st.n_reps,
            m=st.m, methods=tuple(st.methods), base_seed=st.base_seed, event_frac=s.event_frac,
            dropout_frac=s.dropout_frac, fcs_iterations=st.fcs_iterations, rejection_cap=st.rejection_cap,
            smc_event_hazard=st.smc_event_hazard, include_h1=st.include_h1,
            include_interactions=st.include_interactions, alpha=st.alpha, wald=st.wald,
            eval_times=tuple(st.eval_times), curve_step=st.curve_step, workers=st.workers,
            calibration_file=st.calibration_file,
        )


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(_format(e)) from None


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
