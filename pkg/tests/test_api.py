import numpy as np
import pytest
from fastapi.testclient import TestClient

from app import registry, sessions
from app.composite import ThresholdPair
from app.env_config import EnvParams, save_yaml
from app.errors import ConfigurationError
from app.harness import AdaptRecord
from app.main import app
from app.neural import Ensemble, Mlp
from app.ppo import init_policy, save_policy
from app.registry import PolicyBundle, load_bundle
from app.safety import OsseModel


def _constant_osse(value, dim=6):
    member = Mlp(weights=[np.zeros((dim, 1))], biases=[np.array([value])])
    return OsseModel(ensemble=Ensemble(members=[member, member, member]), v_max=1.0)


def _bundle(psi=0.5, thresholds=ThresholdPair()):
    rng = np.random.default_rng(0)
    return PolicyBundle(
        pi_task=init_policy(6, 2, rng, hidden=(8,)),
        pi_protect=init_policy(6, 2, rng, hidden=(8,)),
        osse=_constant_osse(psi),
        thresholds=thresholds,
    )


@pytest.fixture
def client():
    sessions.clear()
    with TestClient(app) as c:
        yield c
    registry.close_registry()
    sessions.clear()


def test_health(client):
    assert client.get("/healthz").json()["status"] == "ok"


def test_readyz_reports_missing_checkpoints(client):
    registry.close_registry()
    assert client.get("/readyz").json() == {"checkpoints": "missing"}


def test_act_without_checkpoints_is_unavailable(client):
    registry.close_registry()
    resp = client.post("/act", json={"observation": [0.0] * 6})
    assert resp.status_code == 503


def test_conservative_thresholds_switch_to_protect(client):
    registry.install(_bundle(psi=0.5))
    resp = client.post("/act", json={"observation": [0.1] * 6})
    assert resp.status_code == 200
    body = resp.json()
    assert body["mode"] == "protect"
    assert body["psi"] == pytest.approx(0.5)
    assert len(body["action"]) == 2
    assert all(-1.0 <= a <= 1.0 for a in body["action"])
    assert client.get("/readyz").json() == {"checkpoints": "loaded"}


def test_mode_persists_within_a_session(client):
    registry.install(_bundle(psi=0.5, thresholds=ThresholdPair(kappa_task=0.6, kappa_protect=0.9)))
    first = client.post("/act", json={"observation": [0.0] * 6}).json()
    assert first["mode"] == "protect"
    registry.install(_bundle(psi=0.8, thresholds=ThresholdPair(kappa_task=0.6, kappa_protect=0.9)))
    second = client.post("/act", json={"session_id": first["session_id"], "observation": [0.0] * 6}).json()
    assert second["mode"] == "protect"
    fresh = client.post("/act", json={"observation": [0.0] * 6}).json()
    assert fresh["mode"] == "task"


def test_reset_returns_session_to_task(client):
    registry.install(_bundle(psi=0.5))
    sid = client.post("/act", json={"observation": [0.0] * 6}).json()["session_id"]
    assert client.post("/reset", json={"session_id": sid}).json() == {"session_id": sid, "mode": "task"}


def test_wrong_observation_size_is_rejected(client):
    registry.install(_bundle())
    resp = client.post("/act", json={"observation": [0.0] * 5})
    assert resp.status_code == 422
    assert "6 entries" in resp.json()["detail"]


def test_reset_forgets_the_session(client):
    registry.install(_bundle(psi=0.5))
    sid = client.post("/act", json={"observation": [0.0] * 6}).json()["session_id"]
    assert sessions.session_count() == 1
    client.post("/reset", json={"session_id": sid})
    assert sessions.session_count() == 0
    assert client.post("/act", json={"session_id": sid, "observation": [0.0] * 6}).json()["session_id"] == sid


def _write_run(directory):
    bundle = _bundle()
    save_policy(bundle.pi_task, directory / "task_policy")
    save_policy(bundle.pi_protect, directory / "protect_policy")
    bundle.osse.save(directory / "osse")
    for method, kappa in (("ours", 0.3), ("safe_bayes", 0.5)):
        record = AdaptRecord(method=method, estimator="osse", thresholds=ThresholdPair(kappa_task=kappa, kappa_protect=0.9),
                             best_return=1.0, unsafe_trials=0, target=EnvParams())
        save_yaml(record, directory / f"thresholds_{method}_t0.yaml")


@pytest.mark.parametrize("method, kappa_task", [("ours", 0.3), ("safe_bayes", 0.5)])
def test_bundle_loads_thresholds_of_the_requested_method(tmp_path, method, kappa_task):
    _write_run(tmp_path)
    bundle = load_bundle(tmp_path, method)
    assert bundle.thresholds.kappa_task == kappa_task
    assert bundle.source.endswith(f"thresholds_{method}_t0.yaml")


@pytest.mark.parametrize("method", ["dr", "dr_re", "no_osse"])
def test_methods_without_osse_thresholds_cannot_be_served(tmp_path, method):
    _write_run(tmp_path)
    with pytest.raises(ConfigurationError):
        load_bundle(tmp_path, method)


def test_session_store_evicts_least_recently_used(client, monkeypatch):
    monkeypatch.setattr(sessions, "MAX_SESSIONS", 2)
    registry.install(_bundle(psi=0.5))
    ids = [client.post("/act", json={"observation": [0.0] * 6}).json()["session_id"] for _ in range(2)]
    client.post("/act", json={"session_id": ids[0], "observation": [0.0] * 6})
    client.post("/act", json={"observation": [0.0] * 6})
    assert sessions.session_count() == 2
    assert sessions.get_mode(ids[0]).value == "protect"
    assert ids[1] not in sessions._store
