from __future__ import annotations

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from api.routers.detection import router as detection_router
from api.routers.evaluation import router as evaluation_router
from common.config import get_settings
from common.run_manifest import APP_VERSION


def create_app() -> FastAPI:
    settings = get_settings()

    app = FastAPI(
        title="Landmark Detection Service",
        version=APP_VERSION,
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

    app.include_router(detection_router)
    app.include_router(evaluation_router)

    @app.get("/healthz", tags=["system"])
    async def health_check() -> dict[str, str]:
        return {
            "status": "ok",
            "environment": settings.environment,
            "detector": "configured" if settings.serving.checkpoint_path else "missing",
        }

    return app


app = create_app()
