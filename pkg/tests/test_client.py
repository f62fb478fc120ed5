from collections import OrderedDict

import numpy as np
import pytest
import torch

from fedtrl.client import (
    ClientDataset,
    LocalTrainingError,
    TrainConfig,
    client_seed,
    compute_client_prototype,
    dataset_patches,
    finetune,
    load_update,
    local_update,
    make_client,
    payload_size,
    save_update,
)
from fedtrl.data import FederationSpec, generate_synthetic_federation, instance_normalize, patchify
from fedtrl.diffusion import build_noise_schedule, forward_diffuse
from fedtrl.model import ModelConfig, build_model, pool_prototype

MCFG = ModelConfig(patch_len=8, d_model=16, n_heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                   max_patches=4, n_subdomains=2, cls_hidden=8, dropout=0.0)
SPEC = FederationSpec(n_clients=2, windows_per_client=12, heldout_per_client=2, unseen_windows=2, T=32, F=8)
SCHED = build_noise_schedule(100)


def fed(seed=0):
    return generate_synthetic_federation(SPEC, seed)


def client(seed=0, cfg=None, model_cfg=MCFG, k=0):
    return make_client(fed(seed).clients[k], model_cfg, cfg or TrainConfig(lr=1e-3, batch_size=4), SCHED, seed)


def broadcast(seed=99):
    return build_model(MCFG, seed).encoder_state()


def test_zero_epochs_is_a_noop_on_the_encoder():
    c = client()
    g = broadcast()
    cfg = TrainConfig(local_epochs=0)
    u = local_update(c, g, None, 1, cfg)
    for k in g:
        assert torch.equal(u.encoder_params[k], g[k])
    fresh = build_model(MCFG, 5)
    fresh.load_encoder_state(g)
    expected = compute_client_prototype(c.dataset, fresh, cfg)
    assert np.array_equal(u.prototype, expected)


def test_local_update_deterministic():
    ups = []
    for _ in range(2):
        c = client(3)
        ups.append(local_update(c, broadcast(), np.zeros(16), 2, TrainConfig(lr=1e-3, batch_size=4, local_epochs=2)))
    a, b = ups
    assert a.n_k == b.n_k and np.array_equal(a.prototype, b.prototype)
    for k in a.encoder_params:
        assert torch.equal(a.encoder_params[k], b.encoder_params[k])


def test_upload_contains_only_encoder_and_prototype(tmp_path):
    c = client()
    u = local_update(c, broadcast(), None, 1, TrainConfig(batch_size=4))
    assert all(k.startswith("encoder.") for k in u.encoder_params)
    n_enc = sum(p.numel() for p in c.model.encoder.parameters())
    assert payload_size(u) == n_enc + MCFG.d_model + 2
    save_update(u, tmp_path / "u", config_hash="h")
    back = load_update(tmp_path / "u")
    assert back.client_id == u.client_id and back.n_k == u.n_k
    assert np.array_equal(back.prototype, u.prototype)
    assert list(back.encoder_params) == list(u.encoder_params)
    # the upload is a snapshot: later local changes do not reach it
    snap = {k: v.clone() for k, v in u.encoder_params.items()}
    with torch.no_grad():
        for p in c.model.parameters():
            p.add_(1.0)
    for k in snap:
        assert torch.equal(u.encoder_params[k], snap[k])


def test_zero_weight_terms_match_pure_reconstruction_reference():
    cfg = TrainConfig(lr=1e-3, batch_size=4, local_epochs=2, lambda_dom=0.0, lambda_align=0.0,
                      grl_lambda=0.0, warm_rounds=10)
    c = client(4, cfg)
    g = broadcast()
    u = local_update(c, g, np.ones(16), 1, cfg)

    # reference: plain MSE training with torch's Adam, replaying the client's streams
    ds = fed(4).clients[0]
    ref = build_model(MCFG, client_seed(4, 0, 0))
    ref.load_encoder_state(g)
    patches, _ = dataset_patches(ds, MCFG.patch_len)
    opt = torch.optim.Adam(ref.parameters(), lr=1e-3, foreach=False)
    rng = np.random.default_rng(client_seed(4, 0, 2))
    for _ in range(2):
        order = rng.permutation(ds.n_k)
        for s in range(0, ds.n_k, 4):
            clean = patches[torch.as_tensor(order[s : s + 4])]
            B, N, P = clean.shape
            t = rng.integers(1, 101, size=(B, N))
            noisy = forward_diffuse(clean, t, rng.standard_normal((B, N, P)), SCHED)
            H = ref.encode(ref.embed_patches(clean))
            xhat = ref.project_point(ref.decode_denoise(noisy, H, torch.as_tensor(SCHED.alpha_bar[t])))
            loss = ((xhat - clean) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    for k, v in ref.encoder_state().items():
        assert torch.equal(u.encoder_params[k], v), k


def test_prototype_examples():
    ds = fed().clients[0]
    m = build_model(MCFG, 0)
    m.eval()
    cfg = TrainConfig()
    one = ClientDataset(0, ds.windows[:1], 2)
    x = torch.as_tensor(patchify(instance_normalize(ds.windows[0].context)[0], 8))[None]
    with torch.no_grad():
        direct = pool_prototype(m.encode(m.embed_patches(x)))[0].numpy()
    np.testing.assert_allclose(compute_client_prototype(one, m, cfg), direct, rtol=0, atol=1e-15)
    full = compute_client_prototype(ds, m, cfg)
    twice = compute_client_prototype(ClientDataset(0, ds.windows * 2, 2), m, cfg)
    np.testing.assert_allclose(twice, full, rtol=0, atol=1e-14)
    h = ds.n_k // 2
    a = compute_client_prototype(ClientDataset(0, ds.windows[:h], 2), m, cfg)
    b = compute_client_prototype(ClientDataset(0, ds.windows[h:], 2), m, cfg)
    np.testing.assert_allclose((a + b) / 2, full, rtol=0, atol=1e-14)


def test_prototype_subsample_is_seeded():
    ds = fed().clients[0]
    m = build_model(MCFG, 0)
    cfg = TrainConfig(proto_samples=4)
    a = compute_client_prototype(ds, m, cfg, seed=1)
    assert np.array_equal(a, compute_client_prototype(ds, m, cfg, seed=1))
    assert not np.array_equal(a, compute_client_prototype(ds, m, cfg, seed=2))


def test_empty_dataset_errors():
    empty = ClientDataset(0, (), 2)
    with pytest.raises(LocalTrainingError):
        make_client(empty, MCFG, TrainConfig(), SCHED, 0)
    with pytest.raises(LocalTrainingError):
        compute_client_prototype(empty, build_model(MCFG, 0), TrainConfig())


def test_nan_loss_names_component():
    c = client()
    with torch.no_grad():
        c.model.subdomain_classifier.fc2.bias[0] = float("nan")
    with pytest.raises(LocalTrainingError, match="dom"):
        local_update(c, c.model.encoder_state(), None, 1, TrainConfig(batch_size=4))


def test_round_must_be_positive():
    c = client()
    with pytest.raises(ValueError):
        local_update(c, broadcast(), None, 0, TrainConfig())


def test_align_step_decreases_distance():
    m = build_model(MCFG, 7)
    m.eval()
    ds = fed().clients[0]
    patches, _ = dataset_patches(ds, 8)
    pg = torch.as_tensor(np.random.default_rng(0).standard_normal(16) * 0.3)
    params = OrderedDict((k, v) for k, v in m.named_parameters() if k.startswith("encoder."))

    def dist():
        return ((pool_prototype(m.encode(m.embed_patches(patches))).mean(0) - pg) ** 2).sum()

    before = dist()
    grads = torch.autograd.grad(before, list(params.values()))
    with torch.no_grad():
        for p, g in zip(params.values(), grads):
            p.sub_(1e-3 * g)
        after = dist()
    assert after < before


@pytest.mark.parametrize("seed", range(5))
def test_training_loss_decreases_within_an_update(seed):
    cfg = TrainConfig(lr=1e-3, batch_size=4, local_epochs=6, warm_rounds=100)
    c = client(seed, cfg)
    local_update(c, c.model.encoder_state(), None, 1, cfg)
    hist = [h["total"] for h in c.last_losses["history"]]
    per = len(hist) // 6
    assert np.median(hist[-per:]) < np.median(hist[:per])


def test_beta_follows_schedule():
    cfg = TrainConfig(batch_size=4, warm_rounds=2, anneal_rounds=2)
    c = client(0, cfg)
    betas = []
    for r in range(1, 6):
        local_update(c, c.model.encoder_state(), None, r, cfg)
        betas.append(c.last_losses["beta"])
    assert betas == [0.0, 0.0, 0.5, 1.0, 1.0]
    assert all("task" in h for h in c.last_losses["history"])


def test_warmup_defaults_scale_with_rounds():
    w = TrainConfig().warmup(60)
    assert (w.warm_rounds, w.anneal_rounds) == (24, 12)
    r = TrainConfig(warm_rounds=3).resolved(60)
    assert (r.warm_rounds, r.anneal_rounds) == (3, 12)


def test_finetune_leaves_client_state_alone():
    c = client(1)
    before = {k: v.clone() for k, v in c.model.state_dict().items()}
    rng_state = c.rng.bit_generator.state
    m = build_model(MCFG, 3)
    m.load_state_dict(c.model.state_dict())
    finetune(c, m, 1, TrainConfig(lr=1e-3, batch_size=4), seed=0)
    assert c.rng.bit_generator.state == rng_state
    for k, v in c.model.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(not torch.equal(v, before[k]) for k, v in m.state_dict().items())
