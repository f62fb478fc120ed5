import copy
import dataclasses
import json

import numpy as np
import pytest
import torch

from conftest import small_experiment_config
from fedtrl.client import local_update
from fedtrl.config import apply_variant, config_hash
from fedtrl.data import ClientDataset, FederationDataset
from fedtrl.experiment import Experiment, build_federation, run_experiment
from fedtrl.server import aggregate_encoders, fedavg_weights


def _same_state(a, b):
    assert a.round == b.round
    for k in a.global_encoder:
        assert torch.equal(a.global_encoder[k], b.global_encoder[k]), k
    assert np.array_equal(a.global_prototype, b.global_prototype)


def test_no_dag_rounds_equal_hand_rolled_fedavg():
    cfg = small_experiment_config(rounds=3)
    exp = Experiment(apply_variant(cfg, "no_dag"))
    ref = Experiment(cfg)  # only borrowed for identically seeded clients
    ge = ref.server.global_encoder
    gp = None
    for r in range(1, 4):
        exp.step()
        ups = [local_update(c, ge, gp, r, ref.cfg.train) for c in ref.clients]
        n = [u.n_k for u in ups]
        ge = aggregate_encoders([u.encoder_params for u in ups], fedavg_weights(n))
        gp = (np.array(n) / sum(n)) @ np.stack([u.prototype for u in ups])
        for k in ge:
            assert torch.equal(exp.server.global_encoder[k], ge[k]), (r, k)
        assert np.array_equal(exp.server.global_prototype, gp)
        assert exp.reports[-1].invariance is None


def test_no_dag_variant_equals_fedavg_aggregation_config():
    cfg = small_experiment_config(rounds=2)
    a = Experiment(apply_variant(cfg, "no_dag")).run()
    cfg_b = copy.deepcopy(cfg)
    cfg_b.dag.aggregation = "fedavg"
    b = Experiment(cfg_b).run()
    _same_state(a.server, b.server)
    for ra, rb in zip(a.reports, b.reports):
        assert ra.to_dict() == rb.to_dict()


def _identical_client_experiment(K):
    cfg = small_experiment_config(rounds=2, n_clients=2)
    fed = build_federation(cfg)
    base = fed.clients[0]
    clients = tuple(ClientDataset(k, base.windows, base.subdomain_count) for k in range(K))
    fed = FederationDataset(clients, {k: fed.held_out[0] for k in range(K)}, fed.unseen, fed.seed)
    exp = Experiment(cfg, federation=fed)
    # same seed streams for every client: clone client 0's state
    for k in range(1, K):
        c = copy.deepcopy(exp.clients[0])
        c.client_id = k
        c.dataset = clients[k]
        exp.clients[k] = c
    return exp


@pytest.mark.parametrize("K", [3, 4])
def test_identical_clients_give_uniform_weights_and_fixed_point(K):
    exp = _identical_client_experiment(K)
    for _ in range(2):
        ge_in = exp.server.global_encoder
        rep = exp.step()
        assert np.ptp(rep.weights) <= 1e-15
        assert np.allclose(rep.weights, 1 / K, rtol=0, atol=1e-15)
        local = exp.clients[0].model.encoder_state()
        for k, v in exp.server.global_encoder.items():
            torch.testing.assert_close(v, local[k], rtol=0, atol=1e-14)
        assert not all(torch.equal(ge_in[k], exp.server.global_encoder[k]) for k in ge_in)


@pytest.mark.parametrize("variant", ["full", "no_grl"])
def test_resume_matches_uninterrupted_run(tmp_path, variant):
    cfg = apply_variant(small_experiment_config(rounds=4, dropout=0.1), variant)
    full = Experiment(cfg).run()
    half = Experiment(cfg)
    half.run(rounds=2)
    half.save_checkpoint(tmp_path / "ckpt")
    resumed = Experiment(cfg)
    resumed.load_checkpoint(tmp_path / "ckpt")
    resumed.run()
    _same_state(full.server, resumed.server)
    for ca, cb in zip(full.clients, resumed.clients):
        for (k, v), (_, w) in zip(ca.model.state_dict().items(), cb.model.state_dict().items()):
            assert torch.equal(v, w), k
    for ra, rb in zip(full.reports[2:], resumed.reports):
        assert ra.to_dict() == rb.to_dict()


def test_checkpoint_rejects_other_config(tmp_path):
    cfg = small_experiment_config(rounds=1)
    exp = Experiment(cfg).run()
    exp.save_checkpoint(tmp_path / "c")
    other = small_experiment_config(rounds=1, seed=5)
    with pytest.raises(ValueError, match="hash"):
        Experiment(other).load_checkpoint(tmp_path / "c")


def test_variants_share_config_hash_and_differ_in_effect():
    cfg = small_experiment_config()
    hashes = {Experiment(dataclasses.replace(cfg, variant=v)).hash for v in ("full", "no_grl", "no_proto", "no_dag", "fedavg")}
    assert hashes == {config_hash(cfg)}
    e = Experiment(dataclasses.replace(cfg, variant="fedavg")).cfg
    assert (e.train.lambda_dom, e.train.lambda_align, e.train.grl_lambda, e.dag.aggregation) == (0.0, 0.0, 0.0, "fedavg")
    assert config_hash(dataclasses.replace(cfg, seed=1)) != config_hash(cfg)


def test_threaded_clients_match_serial():
    cfg = small_experiment_config(rounds=2)
    a = Experiment(dataclasses.replace(cfg, workers=1)).run()
    b = Experiment(dataclasses.replace(cfg, workers=3)).run()
    _same_state(a.server, b.server)


def test_run_experiment_artifacts(tmp_path):
    cfg = small_experiment_config(rounds=2, checkpoint_every=1)
    out = run_experiment(cfg, out_dir=tmp_path / "run")
    d = tmp_path / "run"
    h = out["config_hash"]
    for name in ("config.json", "federation.json", "rounds.jsonl", "metrics.json", "metrics.csv", "manifest.json"):
        assert (d / name).exists(), name
    lines = [json.loads(x) for x in (d / "rounds.jsonl").read_text().splitlines()]
    assert [x["round"] for x in lines] == [1, 2]
    assert all(x["config_hash"] == h for x in lines)
    assert all(abs(sum(x["w"]) - 1) <= 1e-12 for x in lines)
    assert json.loads((d / "manifest.json").read_text())["config_hash"] == h
    assert json.loads((d / "metrics.json").read_text())["config_hash"] == h
    assert json.loads((d / "federation.json").read_text())["config_hash"] == h
    assert (d / "checkpoints" / "round_0001" / "server.json").exists()
    assert (d / "checkpoints" / "final" / "encoder.json").exists()
    rows = (d / "metrics.csv").read_text().splitlines()
    assert rows[0] == "config_hash,protocol,dataset,horizon,metric,value"
    assert all(r.startswith(h + ",") for r in rows[1:])


def test_rerun_gives_byte_identical_metrics(tmp_path):
    cfg = small_experiment_config(rounds=1)
    run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_failure_keeps_last_completed_checkpoint(tmp_path, monkeypatch):
    import fedtrl.experiment as E

    cfg = small_experiment_config(rounds=3)
    calls = {"n": 0}
    real = E.run_round

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("client 1 exploded")
        return real(*a, **kw)

    monkeypatch.setattr(E, "run_round", flaky)
    with pytest.raises(RuntimeError):
        run_experiment(cfg, out_dir=tmp_path / "r")
    man = json.loads((tmp_path / "r" / "checkpoints" / "last_completed" / "encoder.json").read_text())
    assert man["meta"]["round"] == 2


def test_resume_via_run_experiment(tmp_path):
    cfg = small_experiment_config(rounds=2, checkpoint_every=1)
    run_experiment(cfg, out_dir=tmp_path / "a")
    ref = json.loads((tmp_path / "a" / "metrics.json").read_text())
    run_experiment(dataclasses.replace(cfg, rounds=1), out_dir=tmp_path / "b")
    with pytest.raises(ValueError):
        # a shorter run has a different hash
        run_experiment(cfg, out_dir=tmp_path / "b", resume_from=tmp_path / "b" / "checkpoints" / "final")
    run_experiment(cfg, out_dir=tmp_path / "c", resume_from=tmp_path / "a" / "checkpoints" / "round_0001")
    got = json.loads((tmp_path / "c" / "metrics.json").read_text())
    assert got["reports"] == ref["reports"]
