from fastapi.testclient import TestClient

from opkgen.service import app

client = TestClient(app)


def test_healthz():
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


def test_machines_listing():
    r = client.get("/machines")
    assert r.status_code == 200
    assert "sandybridge" in r.json()
    r = client.get("/machines/knc")
    assert r.status_code == 200
    body = r.json()
    assert body["vector_width"] == 8
    assert body["default_kernel"]["mr"] == 8


def test_machines_unknown_400():
    r = client.get("/machines/nosuch")
    assert r.status_code == 400


def test_estimate_endpoint():
    r = client.post("/estimate", json={"machine": "knc", "mr": 8, "nr": 30})
    assert r.status_code == 200
    rows = r.json()["rows"]
    assert len(rows) == 8
    assert rows[0]["lam"] == "1/32"
    assert rows[0]["port_loads"] == {"p0": "32", "p_mem": "32"}


def test_estimate_infeasible_422():
    r = client.post("/estimate", json={"machine": "sandybridge", "mr": 6, "nr": 4})
    assert r.status_code == 422


def test_generate_simulate_verify_flow():
    r = client.post("/generate", json={
        "machine": "sandybridge", "mr": 8, "nr": 4, "name": "k"})
    assert r.status_code == 200
    body = r.json()
    assert body["n_updates"] == 3 and body["ms"] == 4 and body["ns"] == 2
    assert "STEADY STATE CODE" in body["kernel_c"]
    assert "KERN_MACROS_H" in body["macros_h"]

    r = client.post("/simulate", json={"plan": body["plan"], "iterations": 64})
    assert r.status_code == 200
    assert r.json()["deviation"] <= 0.10

    r = client.post("/verify", json={"plan": body["plan"], "seed": 42,
                                     "cases": 20})
    assert r.status_code == 200
    assert r.json()["passed"] is True


def test_generate_with_inline_machine_file():
    from opkgen.machine import emit_machine, load_preset

    text = emit_machine(load_preset("haswell"))
    r = client.post("/generate", json={
        "machine": text, "mr": 4, "nr": 12, "name": "hsw"})
    assert r.status_code == 200
    assert r.json()["subblock_issue"]  # pinned 4x4 exceeds the bound


def test_generate_infeasible_422():
    r = client.post("/generate", json={
        "machine": "sandybridge", "mr": 8, "nr": 4, "depth": 9})
    assert r.status_code == 422
