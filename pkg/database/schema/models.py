import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

FAMILY_NAMES = (
    "normal",
    "exponential",
    "pareto",
    "student_t",
    "lognormal",
    "weibull_stretched",
    "uniform",
    "point_mass",
    "empirical",
)


class FamilySpec(BaseModel):
    """Family name plus positional parameters; `source` is set for empirical laws."""

    model_config = ConfigDict(frozen=True)

    name: Literal[
        "normal",
        "exponential",
        "pareto",
        "student_t",
        "lognormal",
        "weibull_stretched",
        "uniform",
        "point_mass",
        "empirical",
    ]
    params: tuple[float, ...] = ()
    source: str | None = None

    def __str__(self) -> str:
        if self.name == "empirical":
            return f"empirical:@{self.source}"
        if not self.params:
            return self.name
        return f"{self.name}:" + ",".join(f"{p:g}" for p in self.params)


class TailUpweightConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    base: str
    c: float = Field(gt=0)
    t: float
    gamma: float = Field(default=1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _check_threshold(self):
        if not self.t > self.c:
            raise ValueError(f"t must exceed c (t={self.t}, c={self.c})")
        mass = self.c / self.t**self.gamma
        if not 0 < mass < 1:
            raise ValueError(f"upweight mass c/t^gamma={mass} must lie in (0, 1)")
        return self

    @property
    def mass(self) -> float:
        return self.c / self.t**self.gamma


class MixtureKlInput(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(gt=0, lt=1)
    log_q: float = Field(le=0)
    delta_reward: float = 0.0

    @property
    def first_order_regime(self) -> bool:
        return self.log_q < self.alpha_log

    @property
    def alpha_log(self) -> float:
        return math.log(self.alpha)


class SampleSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    values: tuple[float, ...]
    source: str = "unknown"
    seed: int | None = None

    @field_validator("values")
    @classmethod
    def _finite_nonempty(cls, values):
        if len(values) == 0:
            raise ValueError("sample set is empty")
        for i, v in enumerate(values):
            if not math.isfinite(v):
                raise ValueError(f"non-finite value at row {i + 1}")
        return values

    def __len__(self) -> int:
        return len(self.values)


class HillPoint(BaseModel):
    k: int
    hill_estimate: float
    standard_error: float


class QQAnalysis(BaseModel):
    kind: Literal["normal", "exponential_right_half"]
    theoretical: list[float]
    empirical: list[float]
    linearity: float
    curvature: float | None = None
    curvature_sign: Literal["bending_up", "bending_down", "flat"] | None = None


class TailReport(BaseModel):
    source: str
    n: int
    shift: float
    hill_curve: list[HillPoint]
    normal_qq: QQAnalysis
    exp_qq: QQAnalysis
    verdict: Literal["consistent-with-light", "consistent-with-heavy", "ambiguous"]
    rule_trace: list[dict]


class ExperimentConfig(BaseModel):
    """Echoed into every artifact header."""

    model_config = ConfigDict(extra="allow")

    subcommand: Literal["tilt-sweep", "condition-sweep", "mdp-demo", "tails", "kl-calc", "verify"]
    seed: int | None = None
    output_dir: str | None = None
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _grids_sorted(self):
        extra = self.model_extra or {}
        for key, value in extra.items():
            if key.endswith("grid") and isinstance(value, list):
                if not value:
                    raise ValueError(f"{key} must be nonempty")
                if sorted(value) != value:
                    raise ValueError(f"{key} must be sorted ascending")
        return self


class SinkReturn(BaseModel):
    atoms: list[float]
    weights: list[float] | None = None

    @model_validator(mode="after")
    def _weights_match(self):
        if not self.atoms:
            raise ValueError("sink return needs at least one atom")
        if self.weights is not None:
            if len(self.weights) != len(self.atoms):
                raise ValueError("weights and atoms differ in length")
            if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-9:
                raise ValueError("weights must be a probability vector")
        return self


class MdpInstance(BaseModel):
    """JSON schema of a DMRMDP; transitions map state -> action -> next state."""

    states: list[str]
    actions: list[str]
    transitions: dict[str, dict[str, str]]
    start: dict[str, float]
    sinks: list[str]
    returns: dict[str, SinkReturn]
    max_depth: int = Field(gt=0)
    base_policy: dict[str, dict[str, float]] | None = None
