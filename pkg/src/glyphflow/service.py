"""HTTP inference service: async edit jobs, checkpoint and sample browsing.

One worker thread drains a FIFO queue and runs the edit pipeline; HTTP
handlers only read or enqueue. Job records are in-memory and do not survive
restarts: on shutdown every still-queued job is failed with code "restart"
rather than silently dropped.
"""

from __future__ import annotations

import base64
import io
import queue
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel, Field

from . import __version__
from .data import Dataset
from .errors import GlyphFlowError
from .glyphs import Box, LineSpec
from .model import Checkpoint, load_checkpoint
from .pipeline import EditRequest, edit

MAX_IMAGE_SIDE_DEFAULT = 1024


def _ulid(now_ms: int, counter: int) -> str:
    """Sortable 26-char id: 10 chars of millisecond time + 16 of counter/entropy."""
    alphabet = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
    out = []
    t = now_ms
    for _ in range(10):
        out.append(alphabet[t % 32])
        t //= 32
    c = counter
    for _ in range(16):
        out.append(alphabet[c % 32])
        c //= 32
    return "".join(reversed(out))


class LineModel(BaseModel):
    box: list[int] = Field(min_length=4, max_length=4)
    text: str


class EditBody(BaseModel):
    image: str  # base64 PNG
    lines: list[LineModel]
    checkpoint: str
    steps: int | None = None
    seed: int = 0
    color: str | None = None
    client_token: str | None = None


@dataclass
class JobRecord:
    job_id: str
    status: str = "queued"  # queued -> running -> done | failed
    request: dict = field(default_factory=dict)
    result: dict | None = None
    error: dict | None = None
    created_at: float = 0.0
    started_at: float | None = None
    finished_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "status": self.status,
            "request": self.request,
            "result": self.result,
            "error": self.error,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


class ServiceState:
    def __init__(self, checkpoint_dir, dataset_dir=None, max_image_side=MAX_IMAGE_SIDE_DEFAULT):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.dataset_dir = Path(dataset_dir) if dataset_dir else None
        self.max_image_side = max_image_side
        self.jobs: dict[str, JobRecord] = {}
        self.images: dict[str, bytes] = {}
        self.queue: "queue.Queue[str | None]" = queue.Queue()
        self.lock = threading.Lock()
        self.counter = 0
        self._ckpt_cache: dict[str, Checkpoint] = {}
        self.worker: threading.Thread | None = None

    # --- checkpoints ---

    def checkpoint_paths(self) -> dict[str, Path]:
        if not self.checkpoint_dir.exists():
            return {}
        return {p.stem: p for p in sorted(self.checkpoint_dir.glob("*.ckpt"))}

    def load(self, ckpt_id: str) -> Checkpoint | None:
        if ckpt_id in self._ckpt_cache:
            return self._ckpt_cache[ckpt_id]
        path = self.checkpoint_paths().get(ckpt_id)
        if path is None:
            return None
        ckpt = load_checkpoint(path)
        self._ckpt_cache[ckpt_id] = ckpt
        return ckpt

    # --- job lifecycle ---

    def submit(self, record: JobRecord) -> None:
        with self.lock:
            self.jobs[record.job_id] = record
        self.queue.put(record.job_id)

    def next_id(self) -> str:
        with self.lock:
            self.counter += 1
            return _ulid(int(time.time() * 1000), self.counter)

    def queue_depth(self) -> int:
        with self.lock:
            return sum(1 for j in self.jobs.values() if j.status in ("queued", "running"))

    def run_worker(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            with self.lock:
                record = self.jobs[job_id]
                record.status = "running"
                record.started_at = time.time()
            try:
                result_png, meta = self._run_edit(record.request)
                with self.lock:
                    self.images[job_id] = result_png
                    record.result = meta
                    record.status = "done"
                    record.finished_at = time.time()
            except Exception as e:  # noqa: BLE001 - failures land in the record
                with self.lock:
                    record.error = {
                        "code": getattr(e, "code", e.__class__.__name__),
                        "message": str(e),
                    }
                    record.status = "failed"
                    record.finished_at = time.time()

    def _run_edit(self, req: dict) -> tuple[bytes, dict]:
        ckpt = self.load(req["checkpoint"])
        if ckpt is None:
            raise GlyphFlowError(f"unknown checkpoint {req['checkpoint']!r}")
        scene = png_to_array(req["image"])
        lines = [LineSpec(text=l["text"], box=Box(*l["box"])) for l in req["lines"]]
        result = edit(
            EditRequest(
                scene=scene,
                lines=lines,
                checkpoint_id=req["checkpoint"],
                steps=req.get("steps"),
                seed=req.get("seed", 0),
                color=req.get("color"),
            ),
            ckpt,
        )
        meta = {
            "width": int(result.image.shape[1]),
            "height": int(result.image.shape[0]),
            "prompt": result.prompt,
            "seed": result.seed,
            "elapsed_ms": result.elapsed_ms,
        }
        return array_to_png(result.image), meta

    def shutdown(self) -> None:
        with self.lock:
            for record in self.jobs.values():
                if record.status == "queued":
                    record.status = "failed"
                    record.error = {"code": "restart", "message": "service shut down"}
                    record.finished_at = time.time()
        self.queue.put(None)
        if self.worker is not None:
            self.worker.join(timeout=10)


def png_to_array(b64: str) -> np.ndarray:
    raw = base64.b64decode(b64)
    img = Image.open(io.BytesIO(raw))
    return np.asarray(img.convert("RGB"))


def array_to_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _validation_error(field_path: str, message: str, status: int = 400) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"error": {"code": "validation", "field": field_path, "message": message}},
    )


def create_app(
    checkpoint_dir,
    dataset_dir=None,
    max_image_side: int = MAX_IMAGE_SIDE_DEFAULT,
) -> FastAPI:
    state = ServiceState(checkpoint_dir, dataset_dir, max_image_side)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        state.worker = threading.Thread(target=state.run_worker, daemon=True)
        state.worker.start()
        yield
        state.shutdown()

    app = FastAPI(title="glyphflow service", version=__version__, lifespan=lifespan)
    app.state.glyphflow = state
    tokens: dict[str, str] = {}

    @app.exception_handler(GlyphFlowError)
    async def _gf_error(_req: Request, exc: GlyphFlowError):
        return JSONResponse(status_code=400, content={"error": {"code": exc.code, "message": str(exc)}})

    @app.post("/api/edit", status_code=202)
    def submit_edit(body: EditBody):
        if body.client_token and body.client_token in tokens:
            return {"job_id": tokens[body.client_token]}
        ckpt = state.load(body.checkpoint)
        if ckpt is None:
            return JSONResponse(
                status_code=404,
                content={"error": {"code": "unknown_checkpoint", "message": body.checkpoint}},
            )
        try:
            scene = png_to_array(body.image)
        except Exception:
            return _validation_error("image", "not a decodable base64 PNG")
        h, w = scene.shape[:2]
        if max(h, w) > state.max_image_side:
            return JSONResponse(
                status_code=413,
                content={
                    "error": {
                        "code": "image_too_large",
                        "message": f"{w}x{h} exceeds limit {state.max_image_side}",
                    }
                },
            )
        for i, line in enumerate(body.lines):
            x, y, bw, bh = line.box
            if bw <= 0 or bh <= 0:
                return _validation_error(f"lines[{i}].box", "box must have positive size")
            if x < 0 or y < 0 or x + bw > w or y + bh > h:
                return _validation_error(f"lines[{i}].box", "box outside image bounds")
            if not line.text:
                return _validation_error(f"lines[{i}].text", "text must be non-empty")
            for ch in line.text:
                if not any(ch in a.glyphs for a in _ckpt_atlases(ckpt)):
                    return _validation_error(
                        f"lines[{i}].text",
                        f"unsupported codepoint {ch!r} (U+{ord(ch):04X})",
                    )

        job = JobRecord(
            job_id=state.next_id(),
            request=body.model_dump(),
            created_at=time.time(),
        )
        state.submit(job)
        if body.client_token:
            tokens[body.client_token] = job.job_id
        return {"job_id": job.job_id}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        record = state.jobs.get(job_id)
        if record is None:
            return JSONResponse(
                status_code=404, content={"error": {"code": "unknown_job", "message": job_id}}
            )
        payload = record.to_dict()
        payload["request"] = {
            k: v for k, v in payload["request"].items() if k != "image"
        }
        return payload

    @app.get("/api/jobs/{job_id}/image")
    def job_image(job_id: str):
        record = state.jobs.get(job_id)
        if record is None or record.status != "done" or job_id not in state.images:
            return JSONResponse(
                status_code=404,
                content={"error": {"code": "no_image", "message": "job not done"}},
            )
        return Response(content=state.images[job_id], media_type="image/png")

    @app.get("/api/checkpoints")
    def checkpoints():
        out = []
        for ckpt_id in state.checkpoint_paths():
            ckpt = state.load(ckpt_id)
            out.append(
                {
                    "id": ckpt_id,
                    "packs": [spec["pack_id"] for spec in ckpt.packs],
                    "axis": ckpt.compose_config.axis,
                    "trained_steps": int(ckpt.metadata.get("step", 0)),
                }
            )
        return out

    @app.get("/api/health")
    def health():
        return {"ok": True, "queue_depth": state.queue_depth()}

    @app.get("/api/samples")
    def samples(n: int = 8):
        if state.dataset_dir is None or not state.dataset_dir.exists():
            return []
        ds = Dataset(state.dataset_dir)
        out = []
        for idx in range(min(n, len(ds))):
            rec = ds.records[idx]
            out.append(
                {
                    "idx": idx,
                    "w": rec["w"],
                    "h": rec["h"],
                    "pack_id": rec["pack_id"],
                    "lines": rec["lines"],
                    "image": base64.b64encode(array_to_png(ds.scene(idx))).decode(),
                }
            )
        return out

    return app


def _ckpt_atlases(ckpt: Checkpoint):
    from .pipeline import checkpoint_atlases

    return checkpoint_atlases(ckpt)


def run_service(checkpoint_dir, dataset_dir=None, host="127.0.0.1", port=8765, max_image_side=MAX_IMAGE_SIDE_DEFAULT):
    import uvicorn

    app = create_app(checkpoint_dir, dataset_dir, max_image_side)
    uvicorn.run(app, host=host, port=port, log_level="warning")
