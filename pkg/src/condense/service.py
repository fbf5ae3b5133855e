"""HTTP front end over the operations in service_ops.

Run with:

    python -m uvicorn condense.service:app --port 8400

Every endpoint is a POST taking the matching request model. Bad inputs
(unknown presets, malformed checkpoints, shape mismatches) come back as
422; anything else that goes wrong inside an operation is a 500 with the
error text in the body.
"""

from __future__ import annotations

import functools

from fastapi import FastAPI, HTTPException

from . import service_ops as ops
from ._version import __version__
from .errors import CondenseError, ConfigError, ConversionError, DataError, ShapeError

app = FastAPI(title="condense", version=__version__)

# bad paths count as client errors too, same as unknown presets
_CLIENT_ERRORS = (ConfigError, DataError, ShapeError, ConversionError, OSError)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(req):
        try:
            return fn(req)
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except CondenseError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
    return wrapper


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/train")
@_guarded
def train(req: ops.TrainRequest) -> ops.TrainResponse:
    return ops.run_train(req)


@app.post("/prune-baseline")
@_guarded
def prune_baseline(req: ops.TrainRequest) -> ops.TrainResponse:
    return ops.run_prune_baseline(req)


@app.post("/convert")
@_guarded
def convert(req: ops.ConvertRequest) -> ops.ConvertResponse:
    return ops.run_convert(req)


@app.post("/verify")
@_guarded
def verify(req: ops.VerifyRequest) -> ops.VerifyResponse:
    return ops.run_verify(req)


@app.post("/count")
@_guarded
def count(req: ops.CountRequest) -> ops.CountResponse:
    return ops.run_count(req)


@app.post("/export-connectivity")
@_guarded
def export_connectivity(req: ops.ExportConnectivityRequest
                        ) -> ops.ExportConnectivityResponse:
    return ops.run_export_connectivity(req)


@app.post("/synth-data")
@_guarded
def synth_data(req: ops.SynthDataRequest) -> ops.SynthDataResponse:
    return ops.run_synth_data(req)


@app.post("/eval")
@_guarded
def eval_checkpoint(req: ops.EvalRequest) -> ops.EvalResponse:
    return ops.run_eval(req)
