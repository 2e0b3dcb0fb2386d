"""Pydantic models shared by the HTTP service and the CLI client."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

Mode = Literal[
    "solve-qsd",
    "evolve",
    "simulate",
    "stationary",
    "perfect-sample",
    "verify-bounds",
    "sweep",
]

ReferenceSource = Literal["paper", "semigroup-oracle", "qsd-solver", "none"]


class RateEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    from_: str = Field(alias="from")
    to: str
    rate: float


class AbsorptionEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    from_: str = Field(alias="from")
    rate: float


class ChainDocument(BaseModel):
    """The chain-spec JSON interface; unknown fields are rejected."""

    model_config = ConfigDict(extra="forbid")

    states: list[str]
    rates: list[RateEntry] = Field(default_factory=list)
    absorption: list[AbsorptionEntry] = Field(default_factory=list)

    def as_plain_dict(self) -> dict:
        return self.model_dump(by_alias=True)


class BuilderSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["two-state", "walk"]
    p: Optional[float] = None
    L: Optional[int] = None


class ExperimentConfig(BaseModel):
    """One experiment request. The seed is mandatory: no wall-clock seeding."""

    model_config = ConfigDict(extra="forbid")

    mode: Mode
    seed: int
    chain: Optional[ChainDocument] = None
    chain_name: Optional[str] = None
    builder: Optional[BuilderSpec] = None
    mu: Optional[Union[str, dict[str, float]]] = None
    N: Optional[int] = None
    N_list: Optional[list[int]] = None
    t: Optional[float] = None
    replicas: Optional[int] = None
    tol: Optional[float] = None
    burn_in: Optional[float] = None
    horizon: Optional[float] = None
    out: Optional[str] = None


class ResultRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment_id: str
    mode: Mode
    chain_name: str
    N: Optional[int] = None
    t: Optional[float] = None
    state_label: str
    estimate: float
    stderr: float
    reference_value: Optional[float] = None
    reference_source: ReferenceSource = "none"
    replicas: Optional[int] = None
    seed: int


class RunResponse(BaseModel):
    rows: list[ResultRow]
    csv: str
    violations: bool = False


class CompareRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    csv_a: str
    csv_b: str
    tol: float = 0.0


class CompareRow(BaseModel):
    state_label: str
    N: Optional[int] = None
    t: Optional[float] = None
    estimate_a: float
    estimate_b: float
    delta: float
    flagged: bool


class CompareResponse(BaseModel):
    rows: list[CompareRow]
    csv: str
    flagged: bool
    max_delta: float


class HealthResponse(BaseModel):
    status: str
    version: str
