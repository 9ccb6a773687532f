"""HTTP render service: the backend the live puppeteering UI drives.

Endpoints:
  GET  /info    model facts (expression/joint counts, names, canonical
                pose, checkpoint hash)
  POST /render  JSON request -> PNG bytes (same schema and pixel-exact
                output as the `render` subcommand)
  GET  /healthz liveness probe

The loaded checkpoint is immutable and shared; renders run concurrently
up to a configurable parallelism limit (excess requests queue).
"""

from __future__ import annotations

import io
import logging
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from starlette.concurrency import run_in_threadpool

from .config import Config
from .containers import file_sha256
from .errors import InvalidInputError
from .infer import load_for_inference, parse_render_request, render_params
from .morphable import canonical_pose
from .rendering import save_image_png

logger = logging.getLogger("morphhead.service")


def png_bytes(array, kind: str, near: float = 0.1, far: float = 4.0) -> bytes:
    buf = io.BytesIO()
    save_image_png(buf, array, kind, near=near, far=far)
    return buf.getvalue()


def build_app(checkpoint_path, cfg: Config | None = None, frontend_dir=None) -> FastAPI:
    """Construct the service around one loaded checkpoint."""
    nets, template, ckpt_cfg = load_for_inference(checkpoint_path)
    cfg = cfg if cfg is not None else ckpt_cfg
    checkpoint_hash = file_sha256(checkpoint_path)
    render_slots = threading.BoundedSemaphore(max(1, cfg.service.parallelism))

    app = FastAPI(title="morphhead render service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/info")
    def info():
        return {
            "n_e": nets.config.n_expr,
            "n_j": template.n_joints,
            "joint_names": list(template.joint_names),
            "canonical_pose": canonical_pose(template.n_joints).tolist(),
            "checkpoint_hash": checkpoint_hash,
            "latent_dim": nets.config.latent_dim,
            "max_image_side": cfg.service.max_image_side,
        }

    @app.post("/render")
    async def render(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(status_code=400, content={"error": "body must be valid JSON"})
        try:
            parsed = parse_render_request(body, cfg)
        except InvalidInputError as e:
            return JSONResponse(status_code=400, content={"error": str(e)})

        def work() -> bytes:
            # renders are CPU-bound; the semaphore caps how many run at
            # once while excess requests queue in the worker pool
            with render_slots:
                bundle = render_params(
                    nets, template, parsed.params, parsed.camera, cfg, seed=0
                )
            return png_bytes(
                getattr(bundle, parsed.output), parsed.output,
                near=parsed.camera.near, far=parsed.camera.far,
            )

        try:
            payload = await run_in_threadpool(work)
        except Exception:
            incident = uuid.uuid4().hex[:12]
            logger.exception("render failed (incident %s)", incident)
            return JSONResponse(
                status_code=500,
                content={"error": "render failed", "incident": incident},
            )
        return Response(content=payload, media_type="image/png")

    if frontend_dir is not None:
        frontend_dir = Path(frontend_dir)
        if not frontend_dir.is_dir():
            raise InvalidInputError(f"no frontend directory at {frontend_dir}")
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")

    return app


__all__ = ["build_app", "png_bytes"]
