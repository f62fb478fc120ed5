"""Client half of a federated round.

A client receives the global encoder and prototype, runs ``local_epochs``
passes of mini-batch Adam on the combined objective over *all* its local
parameter groups, and uploads only the encoder weights and its prototype.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import ClientDataset, instance_normalize, patchify
from .diffusion import NoiseSchedule, forward_diffuse, sample_timestep
from .losses import (
    LossWeights,
    WarmupSchedule,
    align_loss,
    beta_schedule,
    domain_loss,
    task_loss,
)
from .model import FedTRLModel, ModelConfig, build_model, pool_prototype
from .numerics import backward
from .optim import Adam


class LocalTrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    lambda_dom: float = 0.1
    lambda_align: float = 0.1
    grl_lambda: float = 1.0
    nu: float = 5.0
    warm_rounds: int | None = None  # None -> 40% of the run
    anneal_rounds: int | None = None  # None -> 20% of the run
    proto_samples: int = 0  # 0 -> every window

    def __post_init__(self):
        for name in ("warm_rounds", "anneal_rounds"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                raise ValueError(f"{name} must be an integer")
        if self.proto_samples < 0:
            raise ValueError("proto_samples must be >= 0")

    def weights(self, nll_beta: float) -> LossWeights:
        return LossWeights(self.lambda_dom, self.lambda_align, self.grl_lambda, nll_beta, self.nu)

    def warmup(self, total_rounds: int | None = None) -> WarmupSchedule:
        """Warm-up schedule; unset lengths default to 40% / 20% of ``total_rounds``."""
        warm, anneal = self.warm_rounds, self.anneal_rounds
        if warm is None:
            warm = int(round(0.4 * total_rounds)) if total_rounds else 0
        if anneal is None:
            anneal = max(1, int(round(0.2 * total_rounds))) if total_rounds else 1
        return WarmupSchedule(warm, anneal)

    def resolved(self, total_rounds: int) -> "TrainConfig":
        """Copy with the warm-up lengths fixed for a run of ``total_rounds``."""
        w = self.warmup(total_rounds)
        return replace(self, warm_rounds=w.warm_rounds, anneal_rounds=w.anneal_rounds)


@dataclass
class ClientUpdate:
    client_id: int
    encoder_params: "OrderedDict[str, torch.Tensor]"
    prototype: np.ndarray
    n_k: int


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    model: FedTRLModel
    optimizer: Adam
    rng: np.random.Generator
    torch_gen: torch.Generator
    schedule: NoiseSchedule
    patches: torch.Tensor = field(repr=False)
    labels: torch.Tensor = field(repr=False)
    proto_seed: int = 0
    per_patch: bool = True
    last_losses: dict = field(default_factory=dict)


def dataset_patches(dataset: ClientDataset, P: int) -> tuple[torch.Tensor, torch.Tensor]:
    if dataset.n_k == 0:
        raise LocalTrainingError(f"client {dataset.client_id}: empty dataset")
    rows = [patchify(instance_normalize(w.context)[0], P) for w in dataset.windows]
    labels = [w.subdomain_label for w in dataset.windows]
    return torch.as_tensor(np.stack(rows)), torch.as_tensor(labels, dtype=torch.long)


def client_seed(seed: int, client_id: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, client_id, stream]).generate_state(1, np.uint64)[0] >> 1)


def make_client(
    dataset: ClientDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    schedule: NoiseSchedule,
    seed: int,
    per_patch: bool = True,
) -> ClientState:
    cid = dataset.client_id
    model = build_model(model_cfg, client_seed(seed, cid, 0))
    gen = torch.Generator().manual_seed(client_seed(seed, cid, 1))
    model.set_generator(gen)
    patches, labels = dataset_patches(dataset, model_cfg.patch_len)
    if int(labels.max()) >= model_cfg.n_subdomains:
        raise LocalTrainingError(
            f"client {cid}: label {int(labels.max())} but classifier has {model_cfg.n_subdomains} outputs"
        )
    return ClientState(
        client_id=cid,
        dataset=dataset,
        model=model,
        optimizer=Adam(model.named_parameters(), lr=train_cfg.lr),
        rng=np.random.default_rng(client_seed(seed, cid, 2)),
        torch_gen=gen,
        schedule=schedule,
        patches=patches,
        labels=labels,
        proto_seed=client_seed(seed, cid, 3),
        per_patch=per_patch,
    )


def _noisy(state: ClientState, clean: torch.Tensor, per_patch: bool):
    """Diffused copy of ``clean`` and the per-patch ``alpha_bar`` used."""
    B, N, P = clean.shape
    t = sample_timestep(state.rng, state.schedule.steps, size=(B, N) if per_patch else B)
    if not per_patch:
        t = np.repeat(t[:, None], N, axis=1)
    eps = state.rng.standard_normal((B, N, P))
    return forward_diffuse(clean, t, eps, state.schedule), torch.as_tensor(state.schedule.alpha_bar[t])


def local_losses(state, clean, noisy, labels, global_prototype, cfg: TrainConfig, beta: float, alpha_bar=None):
    """Component losses and the combined objective for one mini-batch."""
    out = state.model(clean, noisy, cfg.grl_lambda, alpha_bar)
    parts = {"task": task_loss(clean, out["xhat"], out["mu"], out["sigma"], cfg.nu, beta)}
    total = parts["task"]
    if cfg.lambda_dom > 0:
        parts["dom"] = domain_loss(out["logits"], labels)
        total = total + cfg.lambda_dom * parts["dom"]
    if cfg.lambda_align > 0 and global_prototype is not None:
        batch_proto = out["prototype"].mean(0)
        parts["align"] = align_loss(batch_proto, global_prototype)
        total = total + cfg.lambda_align * parts["align"]
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise LocalTrainingError(
                f"client {state.client_id}: non-finite {name} loss ({value.item()})"
            )
    return total, parts


def local_update(
    state: ClientState,
    global_encoder,
    global_prototype,
    round_idx: int,
    cfg: TrainConfig,
) -> ClientUpdate:
    if round_idx < 1:
        raise ValueError("rounds are numbered from 1")
    if state.dataset.n_k == 0:
        raise LocalTrainingError(f"client {state.client_id}: empty dataset")
    state.model.load_encoder_state(global_encoder)
    beta = beta_schedule(round_idx, cfg.warmup())
    history = _run_epochs(state, global_prototype, cfg, beta, cfg.local_epochs)
    state.last_losses = {
        "beta": beta,
        "steps": len(history),
        "history": history,
    }
    proto = compute_client_prototype(state.dataset, state.model, cfg, state.proto_seed, state.patches)
    return ClientUpdate(state.client_id, state.model.encoder_state(), proto, state.dataset.n_k)


def _run_epochs(state: ClientState, global_prototype, cfg: TrainConfig, beta: float, epochs: int):
    params = OrderedDict(state.model.named_parameters())
    n = state.dataset.n_k
    history = []
    state.model.train()
    for _ in range(epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            clean = state.patches[idx]
            noisy, ab = _noisy(state, clean, state.per_patch)
            total, parts = local_losses(
                state, clean, noisy, state.labels[idx], global_prototype, cfg, beta, ab
            )
            state.optimizer.step(backward(total, params))
            history.append({k: v.item() for k, v in parts.items()} | {"total": total.item()})
    return history


def finetune(state: ClientState, model: FedTRLModel, epochs: int, cfg: TrainConfig, seed: int) -> FedTRLModel:
    """Adapt ``model`` (all parameter groups) to the client's training windows.

    Runs on a fresh optimizer and private rng streams so the client's own
    training state is left untouched. Alignment is off and the NLL weight is 1.
    """
    gen = torch.Generator().manual_seed(client_seed(seed, state.client_id, 4))
    model.set_generator(gen)
    tmp = replace(
        state,
        model=model,
        optimizer=Adam(model.named_parameters(), lr=cfg.lr),
        rng=np.random.default_rng(client_seed(seed, state.client_id, 5)),
        torch_gen=gen,
        last_losses={},
    )
    _run_epochs(tmp, None, cfg, 1.0, epochs)
    model.set_generator(None)
    model.eval()
    return model


@torch.no_grad()
def compute_client_prototype(dataset, model, cfg: TrainConfig, seed: int = 0, patches=None):
    """Mean of per-window pooled prototypes, optionally over a seeded subsample."""
    if dataset.n_k == 0:
        raise LocalTrainingError(f"client {dataset.client_id}: empty dataset")
    if patches is None:
        patches, _ = dataset_patches(dataset, model.cfg.patch_len)
    if 0 < cfg.proto_samples < len(patches):
        idx = np.sort(np.random.default_rng(seed).choice(len(patches), cfg.proto_samples, replace=False))
        patches = patches[torch.as_tensor(idx)]
    was_training = model.training
    model.eval()
    H = model.encode(model.embed_patches(patches))
    model.train(was_training)
    return pool_prototype(H).mean(0).numpy()


# -- upload payload -------------------------------------------------------


def save_update(update: ClientUpdate, stem, config_hash=None) -> None:
    stem = Path(stem)
    checkpoint.save_tensors(stem, update.encoder_params, {"encoder_only": True}, config_hash)
    sidecar = {
        "client_id": update.client_id,
        "n_k": update.n_k,
        "prototype": [float(v) for v in update.prototype],
        "config_hash": config_hash,
    }
    stem.with_suffix(".update.json").write_text(json.dumps(sidecar))


def load_update(stem) -> ClientUpdate:
    stem = Path(stem)
    tensors, _ = checkpoint.load_tensors(stem)
    side = json.loads(stem.with_suffix(".update.json").read_text())
    return ClientUpdate(side["client_id"], tensors, np.asarray(side["prototype"]), side["n_k"])


def payload_size(update: ClientUpdate) -> int:
    """Count of real numbers carried by an upload."""
    return sum(t.numel() for t in update.encoder_params.values()) + len(update.prototype) + 2


def mean_loss(history, key="total", last=None) -> float:
    vals = [h[key] for h in history if key in h]
    if last:
        vals = vals[-last:]
    return float(np.mean(vals)) if vals else math.nan
