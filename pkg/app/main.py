# app/main.py
from dotenv import load_dotenv
from pathlib import Path

# Load .env from project root (parent of app/)
load_dotenv(dotenv_path=Path(__file__).resolve().parent.parent / ".env")

import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from .config import settings
from .logging import setup_logging
from . import registry
from .errors import ToolkitError
from .routes.act import router as act_router

setup_logging(settings.LOG_LEVEL)
logger = logging.getLogger(__name__)
app = FastAPI(title="Protective Policy Server", version="0.1.0")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
    allow_credentials=False,  # must be False when using "*"
)

@app.on_event("startup")
def _startup():
    try:
        registry.init_registry()
    except ToolkitError as e:
        # stay up; /readyz reports the missing checkpoints
        logger.error("could not load checkpoints: %s", e)

@app.on_event("shutdown")
def _shutdown():
    registry.close_registry()

app.include_router(act_router)

@app.get("/healthz")
def healthz():
    return {"status": "ok", "env": settings.APP_ENV}

@app.get("/readyz")
def readyz():
    ok = registry.registry_ready()
    return {"checkpoints": "loaded" if ok else "missing"}

@app.get("/version")
def version():
    return {"version": app.version, "checkpoint_dir": settings.CHECKPOINT_DIR}
