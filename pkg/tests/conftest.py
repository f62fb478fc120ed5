import numpy as np
import pytest
import torch

from fedtrl.client import TrainConfig
from fedtrl.config import ExperimentConfig
from fedtrl.data import FederationSpec
from fedtrl.diffusion import build_noise_schedule, forward_diffuse
from fedtrl.losses import align_loss, domain_loss, task_loss
from fedtrl.model import ModelConfig, build_model

TOY = ModelConfig(
    patch_len=2, d_model=8, n_heads=2, d_ff=8, enc_layers=1, dec_layers=1,
    max_patches=4, dropout=0.0, n_subdomains=2, cls_hidden=4,
)


@pytest.fixture
def toy_cfg():
    return TOY


def toy_batch(seed, B=2, N=4, cfg=TOY):
    rng = np.random.default_rng(seed)
    clean = torch.as_tensor(rng.standard_normal((B, N, cfg.patch_len)))
    sched = build_noise_schedule(50)
    t = rng.integers(1, 51, size=(B, N))
    noisy = forward_diffuse(clean, t, rng.standard_normal(clean.shape), sched)
    labels = torch.as_tensor(rng.integers(0, cfg.n_subdomains, size=B))
    p_g = torch.as_tensor(rng.standard_normal(cfg.d_model) * 0.5)
    return clean, noisy, labels, p_g, torch.as_tensor(sched.alpha_bar[t])


def loss_components(model, batch, grl=0.7, beta=1.0, lam_dom=0.1, lam_align=0.1):
    clean, noisy, labels, p_g, ab = batch
    out = model(clean, noisy, grl, ab)
    lt = task_loss(clean, out["xhat"], out["mu"], out["sigma"], 5.0, beta)
    ld = domain_loss(out["logits"], labels)
    la = align_loss(out["prototype"].mean(0), p_g)
    return torch.stack([lt, ld, la, lt + lam_dom * ld + lam_align * la])


def simplex_grid(K: int, steps: int) -> np.ndarray:
    """Every point of the K-simplex whose coordinates are multiples of 1/steps."""
    axes = np.meshgrid(*[np.arange(steps + 1)] * (K - 1), indexing="ij")
    head = np.stack([a.ravel() for a in axes], axis=1) if K > 1 else np.zeros((1, 0), int)
    head = head[head.sum(1) <= steps]
    return np.column_stack([head, steps - head.sum(1)]) / steps


def toy_model(seed):
    return build_model(TOY, seed)


def small_experiment_config(**kw) -> ExperimentConfig:
    """Fast configuration for protocol-level tests."""
    cfg = ExperimentConfig(
        seed=kw.pop("seed", 0),
        rounds=kw.pop("rounds", 2),
        checkpoint_every=0,
        model=ModelConfig(patch_len=8, d_model=16, n_heads=2, d_ff=32, enc_layers=1,
                          dec_layers=1, max_patches=8, n_subdomains=2, cls_hidden=16,
                          dropout=kw.pop("dropout", 0.0)),
        train=TrainConfig(local_epochs=1, batch_size=8, lr=1e-3),
    )
    cfg.data.synthetic = FederationSpec(
        n_clients=kw.pop("n_clients", 3), subdomains_per_client=2, windows_per_client=16,
        heldout_per_client=4, unseen_windows=6, T=32, F=16,
    )
    cfg.diffusion.steps = 100
    cfg.eval.horizons = [8, 16]
    cfg.eval.n_samples = 4
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


_ACCEPTANCE = []
_NOTES = []


@pytest.fixture
def acceptance_note():
    """Lines appended here are echoed under the acceptance summary."""
    return _NOTES.append


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{tag}  {name}")
    for line in _NOTES:
        terminalreporter.write_line(f"      {line}")
