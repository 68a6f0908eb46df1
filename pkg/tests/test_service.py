import base64
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from glyphflow.data import gen_dataset
from glyphflow.model import save_checkpoint
from glyphflow.service import create_app

from conftest import tiny_data_config


def _png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _scene(h=64, w=64, seed=0):
    return np.random.default_rng(seed).integers(90, 170, (h, w, 3)).astype(np.uint8)


@pytest.fixture()
def service_env(tmp_path, tiny_checkpoint):
    ckpt_dir = tmp_path / "ckpts"
    ckpt_dir.mkdir()
    save_checkpoint(tiny_checkpoint, ckpt_dir / "tiny.ckpt")
    data_dir = tmp_path / "data"
    gen_dataset(tiny_data_config(), 3, data_dir)
    return ckpt_dir, data_dir


@pytest.fixture()
def client(service_env):
    ckpt_dir, data_dir = service_env
    app = create_app(ckpt_dir, data_dir, max_image_side=256)
    with TestClient(app) as c:
        yield c


def _edit_body(**overrides):
    body = {
        "image": _png_b64(_scene()),
        "lines": [{"box": [8, 8, 24, 12], "text": "HI"}],
        "checkpoint": "tiny",
        "steps": 3,
        "seed": 4,
    }
    body.update(overrides)
    return body


def _wait_done(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        record = client.get(f"/api/jobs/{job_id}").json()
        if record["status"] in ("done", "failed"):
            return record
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} did not finish")


def test_edit_happy_path(client):
    r = client.post("/api/edit", json=_edit_body())
    assert r.status_code == 202
    job_id = r.json()["job_id"]
    record = _wait_done(client, job_id)
    assert record["status"] == "done"
    assert record["result"]["width"] == 64
    img = client.get(f"/api/jobs/{job_id}/image")
    assert img.status_code == 200
    assert img.headers["content-type"] == "image/png"
    arr = np.asarray(Image.open(io.BytesIO(img.content)))
    assert arr.shape == (64, 64, 3)


def test_edit_box_outside_image_is_400_with_field_path(client):
    r = client.post(
        "/api/edit", json=_edit_body(lines=[{"box": [60, 60, 30, 12], "text": "HI"}])
    )
    assert r.status_code == 400
    assert r.json()["error"]["field"] == "lines[0].box"


def test_edit_unsupported_codepoint_is_400(client):
    r = client.post(
        "/api/edit", json=_edit_body(lines=[{"box": [8, 8, 24, 12], "text": "Hé"}])
    )
    assert r.status_code == 400
    detail = r.json()["error"]
    assert detail["field"] == "lines[0].text"
    assert "unsupported codepoint" in detail["message"]


def test_edit_unknown_checkpoint_is_404(client):
    r = client.post("/api/edit", json=_edit_body(checkpoint="missing"))
    assert r.status_code == 404


def test_edit_too_large_is_413(client):
    big = _scene(h=300, w=300)
    r = client.post("/api/edit", json=_edit_body(image=_png_b64(big)))
    assert r.status_code == 413


def test_edit_schema_violation_is_422_or_400(client):
    r = client.post("/api/edit", json={"image": "xx"})
    assert r.status_code in (400, 422)


def test_same_seed_twice_byte_identical(client):
    ids = []
    for _ in range(2):
        r = client.post("/api/edit", json=_edit_body())
        ids.append(r.json()["job_id"])
    images = []
    for job_id in ids:
        assert _wait_done(client, job_id)["status"] == "done"
        images.append(client.get(f"/api/jobs/{job_id}/image").content)
    assert images[0] == images[1]


def test_client_token_idempotency(client):
    a = client.post("/api/edit", json=_edit_body(client_token="tok-1")).json()["job_id"]
    b = client.post("/api/edit", json=_edit_body(client_token="tok-1")).json()["job_id"]
    assert a == b


def test_unknown_job_is_404(client):
    assert client.get("/api/jobs/NOPE").status_code == 404


def test_job_record_echoes_request_without_image(client):
    r = client.post("/api/edit", json=_edit_body())
    record = _wait_done(client, r.json()["job_id"])
    assert "image" not in record["request"]
    assert record["request"]["checkpoint"] == "tiny"
    assert record["request"]["lines"][0]["text"] == "HI"


def test_failed_job_has_machine_readable_code(client, service_env, tmp_path):
    # valid at submit time, fails in the worker: color unsupported by vocab
    r = client.post("/api/edit", json=_edit_body(color="chartreuse"))
    assert r.status_code == 202
    record = _wait_done(client, r.json()["job_id"])
    assert record["status"] == "failed"
    assert record["error"]["code"] == "attribute_unsupported"


def test_checkpoints_listing(client):
    r = client.get("/api/checkpoints")
    assert r.status_code == 200
    entries = r.json()
    assert len(entries) == 1
    assert entries[0]["id"] == "tiny"
    assert entries[0]["packs"] == ["latin36"]
    assert entries[0]["axis"] == "vertical"


def test_checkpoints_empty_dir(tmp_path):
    app = create_app(tmp_path / "none")
    with TestClient(app) as c:
        assert c.get("/api/checkpoints").json() == []


def test_health(client):
    r = client.get("/api/health")
    assert r.status_code == 200
    body = r.json()
    assert body["ok"] is True
    assert body["queue_depth"] >= 0


def test_samples_pass_through_manifest(client, service_env):
    _, data_dir = service_env
    from glyphflow.data import Dataset

    ds = Dataset(data_dir)
    r = client.get("/api/samples", params={"n": 2})
    samples = r.json()
    assert len(samples) == 2
    for idx, s in enumerate(samples):
        assert s["lines"] == ds.records[idx]["lines"]
        arr = np.asarray(Image.open(io.BytesIO(base64.b64decode(s["image"]))))
        assert arr.shape == (ds.records[idx]["h"], ds.records[idx]["w"], 3)


def test_samples_without_dataset(tmp_path, tiny_checkpoint):
    ckpt_dir = tmp_path / "c"
    ckpt_dir.mkdir()
    save_checkpoint(tiny_checkpoint, ckpt_dir / "tiny.ckpt")
    app = create_app(ckpt_dir)
    with TestClient(app) as c:
        assert c.get("/api/samples").json() == []


def test_fifo_completion_order(client):
    ids = [client.post("/api/edit", json=_edit_body(seed=s)).json()["job_id"] for s in (1, 2, 3)]
    records = [_wait_done(client, j) for j in ids]
    starts = [r["started_at"] for r in records]
    assert starts == sorted(starts)


def test_shutdown_fails_queued_jobs(service_env):
    ckpt_dir, data_dir = service_env
    app = create_app(ckpt_dir, data_dir)
    with TestClient(app) as c:
        state = app.state.glyphflow
        # stall the worker queue behind slow jobs, then shut down
        for s in range(3):
            c.post("/api/edit", json=_edit_body(seed=s, steps=8))
        job_ids = list(state.jobs)
    # after lifespan exit, queued jobs must be failed(code=restart), not dropped
    statuses = {state.jobs[j].status for j in job_ids}
    assert statuses <= {"done", "failed"}
    for j in job_ids:
        record = state.jobs[j]
        if record.status == "failed":
            assert record.error["code"] in ("restart",)
