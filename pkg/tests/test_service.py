"""HTTP layer checks through fastapi's in-process test client.

Heavy work (training) is covered elsewhere; here we exercise each route
against the small session artifacts and confirm the error mapping."""

import pytest
from fastapi.testclient import TestClient

from condense.service import app

client = TestClient(app, raise_server_exceptions=False)


def test_health():
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok" and "version" in body


def test_count_preset():
    r = client.post("/count", json={"target": "imagenet-table3",
                                    "input_resolution": 224})
    assert r.status_code == 200
    body = r.json()
    assert body["form"] == "converted"
    assert body["input_resolution"] == 224
    assert body["total_params"] > 2_000_000
    assert "classifier" in body["table"]


def test_count_checkpoint(micro_ckpts):
    train_path, test_path = micro_ckpts
    for path in (train_path, test_path):
        r = client.post("/count", json={"target": str(path)})
        assert r.status_code == 200
    a = client.post("/count", json={"target": str(train_path)}).json()
    b = client.post("/count", json={"target": str(test_path)}).json()
    assert a["form"] == "train" and b["form"] == "converted"
    assert a["total_flops"] > b["total_flops"]


def test_count_unknown_preset_maps_to_422():
    r = client.post("/count", json={"target": "no-such-config"})
    assert r.status_code == 422
    assert "no-such-config" in r.json()["detail"]


def test_count_bad_override_maps_to_422():
    r = client.post("/count", json={"target": "cifar-lgc-small",
                                    "overrides": ["growth=fast"]})
    assert r.status_code == 422


def test_verify_route(micro_ckpts):
    train_path, test_path = micro_ckpts
    r = client.post("/verify", json={"checkpoint_a": str(train_path),
                                     "checkpoint_b": str(test_path),
                                     "n_inputs": 20})
    assert r.status_code == 200
    body = r.json()
    assert body["passed"] is True
    assert body["n_inputs"] == 20
    assert body["max_abs_diff"] <= body["tolerance"]
    assert body["argmax_agreement"] == 1.0


def test_verify_impossible_tolerance_still_200(micro_ckpts):
    # a failed comparison is a result, not a server error
    train_path, test_path = micro_ckpts
    r = client.post("/verify", json={"checkpoint_a": str(train_path),
                                     "checkpoint_b": str(test_path),
                                     "n_inputs": 20, "tolerance": 0.0})
    assert r.status_code == 200


def test_convert_route(micro_run, tmp_path):
    out = tmp_path / "svc.test.ckpt"
    r = client.post("/convert", json={"checkpoint": str(micro_run.checkpoint_path),
                                      "out": str(out)})
    assert r.status_code == 200
    body = r.json()
    assert out.exists()
    # masked parameters already equal the packed count; only flops shrink
    assert body["params_after"] == body["params_before"]
    assert body["flops_after"] < body["flops_before"]


def test_convert_converted_input_maps_to_422(micro_ckpts, tmp_path):
    _, test_path = micro_ckpts
    r = client.post("/convert", json={"checkpoint": str(test_path),
                                      "out": str(tmp_path / "x.ckpt")})
    assert r.status_code == 422


def test_export_connectivity_route(micro_run, tmp_path):
    out = tmp_path / "conn.tsv"
    r = client.post("/export-connectivity",
                    json={"checkpoint": str(micro_run.checkpoint_path),
                          "out": str(out)})
    assert r.status_code == 200
    assert r.json()["out"] == str(out)
    assert out.read_text().startswith("# connectivity export v1")


def test_export_connectivity_rejects_converted(micro_ckpts, tmp_path):
    _, test_path = micro_ckpts
    r = client.post("/export-connectivity",
                    json={"checkpoint": str(test_path),
                          "out": str(tmp_path / "c.tsv")})
    assert r.status_code == 422


def test_eval_route(micro_ckpts, digits_dir):
    train_path, _ = micro_ckpts
    r = client.post("/eval", json={"checkpoint": str(train_path),
                                   "data_dir": str(digits_dir)})
    assert r.status_code == 200
    body = r.json()
    assert body["n"] == 200 and 0 <= body["error"] <= 1


def test_synth_data_route(tmp_path):
    r = client.post("/synth-data", json={"out_dir": str(tmp_path / "d"),
                                         "train_count": 60,
                                         "test_count": 20, "seed": 1})
    assert r.status_code == 200
    assert (tmp_path / "d" / "train-images-idx3-ubyte").exists()


def test_missing_file_maps_to_422(tmp_path):
    r = client.post("/eval", json={"checkpoint": str(tmp_path / "no.ckpt")})
    assert r.status_code == 422
    assert "no.ckpt" in r.json()["detail"]


def test_request_validation_handled_by_fastapi():
    r = client.post("/verify", json={"checkpoint_a": 3})
    assert r.status_code == 422
