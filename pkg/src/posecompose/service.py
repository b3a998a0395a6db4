"""HTTP job service: scene submission, mask preview, polling, artifacts.

POST /api/scenes            submit a SceneSpec (202 + job id; idempotent via
                            an optional "idempotency_key" field)
GET  /api/jobs/{id}         job record (QUEUED/RUNNING/DONE/FAILED)
GET  /api/jobs/{id}/artifacts/{kind}   kind in {image, masks, trace, metrics}
POST /api/masks/preview     synchronous attention-mask PNGs for given poses

Jobs persist in a sqlite table under DATA_DIR and survive restarts
(interrupted jobs are re-queued on startup). A small thread pool executes
generations; records are updated in single transactions. Configuration via
env: PORT, WORKERS, DATA_DIR, POSECOMPOSE_CHECKPOINT.
"""

from __future__ import annotations

import base64
import io
import json
import os
import queue
import sqlite3
import threading
import time
import uuid
import zipfile

import jsonschema
import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .benchio import (aggregate_report, delta_render_factory,
                      image_to_png_bytes, scene_instance_rows, tiny_factory)
from .composer import generate
from .diffusion import make_schedule
from .errors import DomainError
from .metrics import hnd, toy_pose_detector, toy_similarity_oracle
from .pose_geometry import MaskMode, mask_to_png_bytes, masks_for_scene, pose_from_json
from .prompting import SCENE_JSON_SCHEMA, scene_from_json

ARTIFACT_KINDS = ("image", "masks", "trace", "metrics")
CONTENT_TYPES = {
    "image": "image/png",
    "masks": "application/zip",
    "trace": "application/json",
    "metrics": "application/json",
}

PREVIEW_SCHEMA = {
    "type": "object",
    "required": ["poses", "canvas"],
    "properties": {
        "poses": {"type": "array", "minItems": 1},
        "canvas": {
            "type": "object",
            "required": ["h", "w"],
            "properties": {"h": {"type": "integer", "minimum": 8},
                           "w": {"type": "integer", "minimum": 8}},
        },
        "harmony": {"type": "object"},
        "mode": {"enum": ["SOFT", "HARD"]},
    },
}


class JobStore:
    """Sqlite-backed job records plus on-disk artifacts."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)
        self.db_path = os.path.join(data_dir, "jobs.db")
        self._lock = threading.Lock()
        with self._conn() as c:
            c.execute("""
                CREATE TABLE IF NOT EXISTS jobs (
                    id TEXT PRIMARY KEY,
                    state TEXT NOT NULL,
                    scene TEXT NOT NULL,
                    error TEXT,
                    idempotency_key TEXT UNIQUE,
                    created_at REAL NOT NULL,
                    updated_at REAL NOT NULL
                )
            """)

    def _conn(self):
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def artifact_dir(self, job_id: str) -> str:
        return os.path.join(self.data_dir, "artifacts", job_id)

    def create(self, scene_json: dict, idempotency_key=None):
        """Returns (job_id, created); created is False on an idempotent hit."""
        with self._lock, self._conn() as c:
            if idempotency_key:
                row = c.execute(
                    "SELECT id FROM jobs WHERE idempotency_key = ?",
                    (idempotency_key,)).fetchone()
                if row:
                    return row["id"], False
            job_id = uuid.uuid4().hex[:12]
            now = time.time()
            c.execute(
                "INSERT INTO jobs (id, state, scene, idempotency_key, created_at, updated_at)"
                " VALUES (?, 'QUEUED', ?, ?, ?, ?)",
                (job_id, json.dumps(scene_json), idempotency_key, now, now))
            return job_id, True

    def get(self, job_id: str):
        with self._conn() as c:
            row = c.execute("SELECT * FROM jobs WHERE id = ?", (job_id,)).fetchone()
        return dict(row) if row else None

    def set_state(self, job_id: str, state: str, error=None):
        with self._lock, self._conn() as c:
            c.execute("UPDATE jobs SET state = ?, error = ?, updated_at = ? WHERE id = ?",
                      (state, error, time.time(), job_id))

    def requeue_interrupted(self):
        with self._lock, self._conn() as c:
            c.execute("UPDATE jobs SET state = 'QUEUED' WHERE state = 'RUNNING'")
            return [r["id"] for r in
                    c.execute("SELECT id FROM jobs WHERE state = 'QUEUED'").fetchall()]


def _error(status: int, code: str, message: str, path: str | None = None):
    body = {"version": 1, "error": {"code": code, "message": message}}
    if path is not None:
        body["error"]["path"] = path
    return JSONResponse(body, status_code=status)


def _schema_error(exc: jsonschema.ValidationError):
    path = "/" + "/".join(str(p) for p in exc.absolute_path)
    return _error(422, "SCHEMA_INVALID", exc.message, path)


def execute_job(store: JobStore, job_id: str, denoiser_factory, oracle, detector):
    record = store.get(job_id)
    if record is None:
        return
    store.set_state(job_id, "RUNNING")
    try:
        scene = scene_from_json(json.loads(record["scene"]))
        image, trace = generate(scene, denoiser_factory)
        out = store.artifact_dir(job_id)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "image.png"), "wb") as f:
            f.write(image_to_png_bytes(image))
        maskset = masks_for_scene(
            [inst.pose for inst in scene.instances], *scene.canvas,
            tau=scene.harmony.tau, mode=MaskMode.SOFT)
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as z:
            for i in range(maskset.n_instances):
                z.writestr(f"mask_{i:02d}.png", mask_to_png_bytes(maskset.base[i]))
        with open(os.path.join(out, "masks.zip"), "wb") as f:
            f.write(buf.getvalue())
        with open(os.path.join(out, "trace.json"), "w") as f:
            json.dump(trace, f)
        rows, dets = scene_instance_rows(image, scene, oracle, detector)
        report = aggregate_report(
            rows, [hnd(scene.n_instances, len(dets))],
            [[inst.pose for inst in scene.instances]], [dets])
        metrics_doc = {
            "version": 1,
            "per_instance": rows,
            "summary": {m: (None if isinstance(v, float) and np.isnan(v) else v)
                        for m, v, _ in report.to_rows()},
        }
        with open(os.path.join(out, "metrics.json"), "w") as f:
            json.dump(metrics_doc, f)
        store.set_state(job_id, "DONE")
    except Exception as exc:  # job isolation: any failure marks the record
        store.set_state(job_id, "FAILED", error=f"{type(exc).__name__}: {exc}")


def create_app(data_dir=None, workers=None, checkpoint=None, synchronous=False) -> FastAPI:
    """Build the service. ``synchronous=True`` executes jobs inline (used by
    tests and single-process demos)."""
    data_dir = data_dir or os.environ.get("DATA_DIR", "./posecompose_data")
    workers = workers or int(os.environ.get("WORKERS", "2"))
    checkpoint = checkpoint or os.environ.get("POSECOMPOSE_CHECKPOINT")

    sched = make_schedule()
    if checkpoint:
        from .denoisers.checkpoint import load_params
        denoiser_factory = tiny_factory(load_params(checkpoint), sched)
    else:
        denoiser_factory = delta_render_factory(sched)
    oracle, detector = toy_similarity_oracle(), toy_pose_detector()

    store = JobStore(data_dir)
    app = FastAPI(title="posecompose service", version="1")
    app.state.store = store

    jobs_q: queue.Queue = queue.Queue()

    def worker_loop():
        while True:
            job_id = jobs_q.get()
            if job_id is None:
                return
            execute_job(store, job_id, denoiser_factory, oracle, detector)

    if not synchronous:
        for _ in range(workers):
            threading.Thread(target=worker_loop, daemon=True).start()
    for job_id in store.requeue_interrupted():
        if synchronous:
            execute_job(store, job_id, denoiser_factory, oracle, detector)
        else:
            jobs_q.put(job_id)

    def submit(job_id):
        if synchronous:
            execute_job(store, job_id, denoiser_factory, oracle, detector)
        else:
            jobs_q.put(job_id)

    @app.post("/api/scenes")
    async def post_scene(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return _error(422, "SCHEMA_INVALID", "body is not valid JSON", "/")
        idempotency_key = None
        if isinstance(payload, dict):
            idempotency_key = payload.pop("idempotency_key", None)
        try:
            jsonschema.validate(payload, SCENE_JSON_SCHEMA)
        except jsonschema.ValidationError as exc:
            return _schema_error(exc)
        try:
            scene_from_json(payload)  # domain-level validation beyond the schema
        except (DomainError, KeyError) as exc:
            code = exc.code if isinstance(exc, DomainError) else "SCHEMA_INVALID"
            return _error(422, code, str(exc), "/")
        job_id, created = store.create(payload, idempotency_key)
        if created:
            submit(job_id)
        return JSONResponse({"version": 1, "id": job_id}, status_code=202)

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        record = store.get(job_id)
        if record is None:
            return _error(404, "UNKNOWN_JOB", f"no job {job_id}")
        body = {
            "version": 1,
            "id": record["id"],
            "state": record["state"],
            "scene": json.loads(record["scene"]),
            "error": record["error"],
            "created_at": record["created_at"],
            "updated_at": record["updated_at"],
        }
        if record["state"] == "DONE":
            body["artifacts"] = {k: f"/api/jobs/{job_id}/artifacts/{k}" for k in ARTIFACT_KINDS}
        return JSONResponse(body)

    @app.get("/api/jobs/{job_id}/artifacts/{kind}")
    def get_artifact(job_id: str, kind: str):
        record = store.get(job_id)
        if record is None or kind not in ARTIFACT_KINDS:
            return _error(404, "UNKNOWN_JOB", f"no job {job_id} or kind {kind}")
        if record["state"] != "DONE":
            return _error(409, "NOT_READY", f"job is {record['state']}")
        names = {"image": "image.png", "masks": "masks.zip",
                 "trace": "trace.json", "metrics": "metrics.json"}
        path = os.path.join(store.artifact_dir(job_id), names[kind])
        with open(path, "rb") as f:
            return Response(f.read(), media_type=CONTENT_TYPES[kind])

    @app.post("/api/masks/preview")
    async def preview_masks(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return _error(422, "SCHEMA_INVALID", "body is not valid JSON", "/")
        try:
            jsonschema.validate(payload, PREVIEW_SCHEMA)
        except jsonschema.ValidationError as exc:
            return _schema_error(exc)
        harmony = payload.get("harmony", {})
        tau = harmony.get("tau", 0.001)
        mode = MaskMode(payload.get("mode", "SOFT"))
        H, W = payload["canvas"]["h"], payload["canvas"]["w"]
        try:
            poses = [pose_from_json(p) for p in payload["poses"]]
            maskset = masks_for_scene(poses, H, W, tau=tau, mode=mode)
        except DomainError as exc:
            return _error(422, exc.code, exc.message, "/poses")
        masks = [base64.b64encode(mask_to_png_bytes(maskset.base[i])).decode("ascii")
                 for i in range(maskset.n_instances)]
        return JSONResponse({"version": 1, "mode": mode.value, "tau": tau,
                             "masks": [{"instance": i, "png_base64": m}
                                       for i, m in enumerate(masks)]})

    return app
