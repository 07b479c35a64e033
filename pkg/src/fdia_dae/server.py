from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException, Request

from .errors import DimensionError, FdiaError, ModelFileError, QueueNotReadyError
from .log import configure_logging, log_json
from .neural import DaeModel, load_model
from .pipeline import IdentificationThresholds, OnlineCorrector
from .streaming import state_from_event

Json = Dict[str, Any]

load_dotenv()

MODEL_PATH_ENV = "FDIA_MODEL_PATH"

_MODEL_CACHE: Optional[DaeModel] = None
_CORRECTOR: Optional[OnlineCorrector] = None
_LOCK = threading.Lock()

logger = configure_logging()

app = FastAPI(title="fdia-dae", version="0.1.0")


def _model_path() -> Path:
    return Path(os.getenv(MODEL_PATH_ENV, "runs/default/model.bin"))


def _thresholds() -> IdentificationThresholds:
    try:
        theta = float(os.getenv("FDIA_THETA_THRESH", "0.01"))
        v = float(os.getenv("FDIA_V_THRESH", "0.01"))
        return IdentificationThresholds(theta, v)
    except (ValueError, FdiaError) as exc:
        logger.error("invalid identification thresholds: %s", exc)
        raise HTTPException(status_code=500, detail="Invalid identification thresholds")


def _get_model() -> DaeModel:
    global _MODEL_CACHE
    if _MODEL_CACHE is not None:
        return _MODEL_CACHE

    path = _model_path()
    if not path.exists():
        logger.error("model file missing path=%s", str(path))
        raise HTTPException(status_code=500, detail=f"Missing model file {path}")
    try:
        _MODEL_CACHE = load_model(path)
    except ModelFileError as exc:
        logger.exception("failed to load model path=%s", str(path))
        raise HTTPException(status_code=500, detail=str(exc))
    logger.info(
        "model.loaded path=%s w=%d n_states=%d slack_index=%d",
        str(path),
        _MODEL_CACHE.w,
        _MODEL_CACHE.n_states,
        _MODEL_CACHE.slack_index,
    )
    return _MODEL_CACHE


def _get_corrector() -> OnlineCorrector:
    global _CORRECTOR
    if _CORRECTOR is None:
        model = _get_model()
        _CORRECTOR = OnlineCorrector(model, _thresholds(), slack_index=model.slack_index)
    return _CORRECTOR


def reset_state() -> None:
    """Drop the cached model and queue (used by tests and /v1/reset)."""

    global _MODEL_CACHE, _CORRECTOR
    with _LOCK:
        _MODEL_CACHE = None
        _CORRECTOR = None


async def _read_event(request: Request) -> Json:
    try:
        payload = await request.json()
    except Exception as exc:
        logger.warning("invalid json body", exc_info=exc)
        raise HTTPException(status_code=400, detail="Invalid JSON body")
    if not isinstance(payload, dict):
        raise HTTPException(status_code=400, detail="Invalid JSON body")
    return payload


@app.get("/v1/health")
def health() -> Json:
    corrector = _CORRECTOR
    return {
        "status": "ok",
        "model_loaded": _MODEL_CACHE is not None,
        "queue": len(corrector.queue) if corrector else 0,
        "ready": bool(corrector and corrector.ready),
    }


@app.post("/v1/states")
async def push_state(request: Request) -> Json:
    payload = await _read_event(request)
    log_json(logger, "server.state", payload)
    with _LOCK:
        corrector = _get_corrector()
        try:
            _, _, x = state_from_event(payload, corrector.model.n_states // 2)
            corrector.push_trusted(x)
        except (ValueError, TypeError, DimensionError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"queue": len(corrector.queue), "ready": corrector.ready}


@app.post("/v1/correct")
async def correct_state(request: Request) -> Json:
    payload = await _read_event(request)
    log_json(logger, "server.correct.request", payload)
    with _LOCK:
        corrector = _get_corrector()
        try:
            timestep, _, x = state_from_event(payload, corrector.model.n_states // 2)
            outcome = corrector.correct(x, timestep)
        except QueueNotReadyError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (ValueError, TypeError, DimensionError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except FdiaError as exc:
            logger.exception("correction failed")
            raise HTTPException(status_code=500, detail=str(exc))
    out = outcome.to_json()
    log_json(logger, "server.correct.response", out)
    return out


@app.post("/v1/reset")
def reset() -> Json:
    with _LOCK:
        if _CORRECTOR is not None:
            _CORRECTOR.reset()
    logger.info("pipeline.reset")
    return {"queue": 0, "ready": False}
