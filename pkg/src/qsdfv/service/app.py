"""HTTP service exposing the experiment harness.

Run with: uvicorn qsdfv.service.app:app
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..chain import ChainError
from ..conditioned import ConvergenceError
from ..experiments import ConfigError, compare, run
from .schemas import (
    CompareRequest,
    CompareResponse,
    ExperimentConfig,
    HealthResponse,
    RunResponse,
)

app = FastAPI(
    title="qsdfv",
    description=(
        "Quasi-stationary distributions of absorbed Markov chains and their "
        "Fleming-Viot particle approximations"
    ),
    version=__version__,
)


@app.get("/healthz", response_model=HealthResponse)
def healthz() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/run", response_model=RunResponse)
def run_experiment(config: ExperimentConfig) -> RunResponse:
    try:
        return run(config)
    except (ChainError, ConfigError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except ConvergenceError as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc


@app.post("/compare", response_model=CompareResponse)
def compare_reports(request: CompareRequest) -> CompareResponse:
    try:
        return compare(request.csv_a, request.csv_b, request.tol)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
