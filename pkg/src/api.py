"""Laplace Adjoint API: fit, gradient and prediction over HTTP."""

from __future__ import annotations

import logging
from datetime import datetime

import numpy as np
import pandas as pd
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .adjoint import marginal_gradient
from .config import get_settings
from .errors import LaplaceError
from .models import MODEL_KINDS, LatentGaussianModel, build_model, default_hyperparameters
from .newton import LaplaceFit, laplace_fit
from .posterior import predictive
from .schemas import (
    ErrorResponse,
    FitRequest,
    FitResponse,
    GradientRequest,
    GradientResponse,
    HealthResponse,
    ModelInfo,
    PredictRequest,
    PredictResponse,
)

logger = logging.getLogger(__name__)

settings = get_settings()

app = FastAPI(
    title=settings.app_name,
    description="Integrated Laplace approximation with adjoint hyperparameter gradients",
    version=settings.version,
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(LaplaceError)
async def laplace_error_handler(request: Request, exc: LaplaceError):
    body = ErrorResponse(error=type(exc).__name__, message=str(exc), recoverable=exc.recoverable)
    return JSONResponse(status_code=422, content=body.model_dump())


def _model_from(request: FitRequest) -> LatentGaussianModel:
    if request.model not in MODEL_KINDS:
        raise HTTPException(status_code=400, detail=f"Unknown model kind: {request.model}")
    d = request.data
    if request.model == "pk":
        if d.patient_id is None or d.time is None or d.amount is None:
            raise HTTPException(status_code=400, detail="pk data needs patient_id, time and amount")
        frame = pd.DataFrame({"patient_id": d.patient_id, "time": d.time, "amount": d.amount})
    else:
        if d.x is None or d.y is None:
            raise HTTPException(status_code=400, detail="GP data needs x and y")
        X = np.asarray(d.x, dtype=float)
        if X.ndim != 2 or X.shape[0] != len(d.y):
            raise HTTPException(status_code=400, detail="x must hold one row per y value")
        frame = pd.DataFrame({f"x{j}": X[:, j] for j in range(X.shape[1])})
        frame["y"] = d.y
    return build_model(request.model, frame, nu=request.nu)


def _fit(request: FitRequest):
    model = _model_from(request)
    phi, eta = default_hyperparameters(model)
    if request.phi is not None:
        phi = np.asarray(request.phi, dtype=float)
    if request.eta is not None:
        eta = np.asarray(request.eta, dtype=float)
    K = np.asarray(model.covariance.matrix(phi), dtype=float)
    fit: LaplaceFit = laplace_fit(K, model.likelihood, eta, strategy=request.strategy)
    return model, phi, eta, fit


# ==================== Health ====================

@app.get("/", response_model=HealthResponse)
async def root():
    """Root endpoint, health check."""
    return HealthResponse(status="healthy", version=settings.version, timestamp=datetime.now())


@app.get("/health", response_model=HealthResponse)
async def health():
    """Health check endpoint."""
    return HealthResponse(status="healthy", version=settings.version, timestamp=datetime.now())


# ==================== Models ====================

@app.get("/api/models", response_model=list[ModelInfo])
async def list_models():
    """Model kinds with their hyperparameter names."""
    frame = pd.DataFrame({"x0": [0.0, 1.0], "y": [0.0, 1.0]})
    pk = pd.DataFrame({"patient_id": [0], "time": [1.0], "amount": [0.5]})
    infos = []
    for kind in MODEL_KINDS:
        model = build_model(kind, pk if kind == "pk" else frame)
        infos.append(
            ModelInfo(
                kind=kind,
                block_size=model.likelihood.block_size,
                phi=[h.name for h in model.phi_params],
                eta=[h.name for h in model.eta_params],
                full_hmc=model.covariance.structure == "diagonal",
            )
        )
    return infos


# ==================== Laplace ====================

@app.post("/api/fit", response_model=FitResponse)
def fit_endpoint(request: FitRequest):
    """Mode and approximate log marginal likelihood."""
    _, _, _, fit = _fit(request)
    return FitResponse(
        log_marginal=fit.log_marginal,
        theta=fit.theta.tolist(),
        iterations=fit.iterations,
        strategy=fit.strategy,
    )


@app.post("/api/gradient", response_model=GradientResponse)
def gradient_endpoint(request: GradientRequest):
    """Adjoint gradient of the log marginal in (phi, eta)."""
    model, phi, eta, fit = _fit(request)
    grad = marginal_gradient(fit, model.covariance, phi, model.likelihood, eta, method=request.method.value)
    return GradientResponse(
        log_marginal=grad.log_marginal,
        names=list(model.names),
        grad_phi=grad.grad_phi.tolist(),
        grad_eta=grad.grad_eta.tolist(),
    )


@app.post("/api/predict", response_model=PredictResponse)
def predict_endpoint(request: PredictRequest):
    """Latent predictive at new inputs (GP models only)."""
    if request.model == "pk":
        raise HTTPException(status_code=400, detail="prediction needs a kernel model")
    model, phi, _, fit = _fit(request)
    X_new = np.asarray(request.x_new, dtype=float)
    g = predictive(fit, model.covariance.cross(phi, X_new), model.covariance.self_cov(phi, X_new))
    return PredictResponse(mean=g.mean.tolist(), variance=np.diag(g.cov).tolist(), cov=g.cov.tolist())


# ==================== Entry Point ====================

def main():
    """Run the server."""
    import uvicorn
    uvicorn.run(
        "src.api:app",
        host="127.0.0.1",
        port=8000,
        reload=settings.debug
    )


if __name__ == "__main__":
    main()
