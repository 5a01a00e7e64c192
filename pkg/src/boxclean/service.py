"""HTTP review service over a run directory.

Exposes the pending review queue, per-image overlays, and a decision endpoint
that appends to ``step2/decisions.jsonl`` — the same append-only log the
pipeline's `finalize_run` replays, so reviews survive restarts and the last
decision per item wins.

Endpoints (all JSON unless noted):

    GET  /api/queue?status=&image_id=&offset=&limit=   paged item list
    GET  /api/items/{item_id}                          one item
    GET  /api/images/{image_id}                        image bytes (PNG)
    GET  /api/images/{image_id}/overlay                boxes + regions to draw
    POST /api/items/{item_id}/decision                 record a decision
    GET  /api/progress                                 counts + review cost

When a shared token is configured, every /api request must carry it in the
``X-Review-Token`` header. A built UI (if present) is served at ``/``.
"""

from __future__ import annotations

import json
import os
import threading
from datetime import datetime, timezone
from pathlib import Path

from fastapi import Body, FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .budget import CostModel
from .correction import (
    DecisionRecord,
    ReviewItem,
    load_decisions,
    load_queue,
    materialize_queue,
    resolve_item,
)
from .errors import DataFormatError, StateError
from .geometry import Box


class ReviewStore:
    """Queue + decision log for one run directory; thread-safe appends."""

    def __init__(self, workdir: str | Path) -> None:
        self.workdir = Path(workdir)
        queue_path = self.workdir / "step2" / "queue.jsonl"
        if not queue_path.exists():
            raise StateError(f"{queue_path} not found: run the pipeline first")
        self.queue = load_queue(queue_path)
        self.decisions_path = self.workdir / "step2" / "decisions.jsonl"
        current = materialize_queue(self.queue, load_decisions(self.decisions_path))
        self.items: dict[int, ReviewItem] = {item.item_id: item for item in current}
        self.order = [item.item_id for item in current]
        overlay_path = self.workdir / "step2" / "overlays.json"
        self.overlays: dict = (
            json.loads(overlay_path.read_text()) if overlay_path.exists() else {}
        )
        self.images_dir = self.workdir / "images"
        self.cost = self._load_cost_model()
        self._lock = threading.Lock()

    def _load_cost_model(self) -> CostModel:
        config_path = self.workdir / "config.json"
        if config_path.exists():
            raw = json.loads(config_path.read_text()).get("cost", {})
            return CostModel(**raw)
        return CostModel()

    def list_items(
        self,
        status: str | None = None,
        image_id: int | None = None,
        offset: int = 0,
        limit: int = 50,
    ) -> tuple[list[ReviewItem], int]:
        selected = [self.items[i] for i in self.order]
        if status is not None:
            selected = [item for item in selected if item.status.value == status]
        if image_id is not None:
            selected = [item for item in selected if item.image_id == image_id]
        return selected[offset : offset + limit], len(selected)

    def get(self, item_id: int) -> ReviewItem:
        try:
            return self.items[item_id]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no review item {item_id}") from None

    def record(self, item_id: int, decision: DecisionRecord) -> ReviewItem:
        with self._lock:
            updated = resolve_item(self.get(item_id), decision)
            with self.decisions_path.open("a") as log:
                log.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")
                log.flush()
                os.fsync(log.fileno())
            self.items[item_id] = updated
        return updated

    def progress(self) -> dict:
        by_status: dict[str, int] = {}
        for item in self.items.values():
            by_status[item.status.value] = by_status.get(item.status.value, 0) + 1
        resolved = sum(1 for item in self.items.values() if item.resolved())
        pending = len(self.items) - resolved
        rate = self.cost.review_item
        return {
            "total": len(self.items),
            "resolved": resolved,
            "pending": pending,
            "by_status": dict(sorted(by_status.items())),
            "cost_per_item": rate,
            "review_cost_spent": resolved * rate,
            "review_cost_remaining": pending * rate,
        }


def create_app(
    workdir: str | Path,
    token: str | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    store = ReviewStore(workdir)
    app = FastAPI(title="boxclean review", docs_url=None, redoc_url=None)
    app.state.store = store

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if token and request.url.path.startswith("/api"):
            if request.headers.get("x-review-token") != token:
                return JSONResponse({"detail": "missing or wrong token"}, status_code=401)
        return await call_next(request)

    @app.exception_handler(DataFormatError)
    async def bad_payload(_request: Request, exc: DataFormatError):
        return JSONResponse({"detail": str(exc)}, status_code=400)

    @app.exception_handler(StateError)
    async def bad_state(_request: Request, exc: StateError):
        return JSONResponse({"detail": str(exc)}, status_code=409)

    @app.get("/api/queue")
    def get_queue(
        status: str | None = None,
        image_id: int | None = None,
        offset: int = 0,
        limit: int = 50,
    ) -> dict:
        items, total = store.list_items(status, image_id, offset, limit)
        return {
            "items": [item.to_dict() for item in items],
            "total": total,
            "offset": offset,
            "limit": limit,
        }

    @app.get("/api/items/{item_id}")
    def get_item(item_id: int) -> dict:
        return store.get(item_id).to_dict()

    @app.get("/api/images/{image_id}")
    def get_image(image_id: int):
        overlay = store.overlays.get(str(image_id))
        file_name = overlay["file_name"] if overlay else f"img_{image_id:05d}.png"
        path = store.images_dir / file_name
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no rendered image for {image_id}")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/images/{image_id}/overlay")
    def get_overlay(image_id: int) -> dict:
        overlay = store.overlays.get(str(image_id))
        if overlay is None:
            raise HTTPException(status_code=404, detail=f"no overlay for image {image_id}")
        return overlay

    @app.post("/api/items/{item_id}/decision")
    def post_decision(item_id: int, payload: dict = Body(...)) -> dict:
        if "action" not in payload:
            raise DataFormatError("decision payload needs an 'action' field")
        box = payload.get("box")
        if box is not None:
            try:
                box = Box(*(float(v) for v in box))
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"bad box in decision: {exc}") from None
        decision = DecisionRecord(
            item_id=item_id,
            action=str(payload["action"]),
            suggestion_id=payload.get("suggestion_id"),
            box=box,
            reviewer=str(payload.get("reviewer", "anonymous")),
            decided_at=payload.get("decided_at")
            or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )
        return store.record(item_id, decision).to_dict()

    @app.get("/api/progress")
    def get_progress() -> dict:
        return store.progress()

    ui = Path(ui_dir) if ui_dir else Path(workdir) / "ui"
    if ui.is_dir():
        app.mount("/", StaticFiles(directory=ui, html=True), name="ui")
    return app
