"""Local network: causal patch encoder, shifted cross-attention denoiser,
point / Student-t heads, prototype pooling and the GRL-fronted sub-domain
classifier.

Only ``model.encoder`` is ever shared with the server; everything else stays
on the client.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import instance_denormalize, instance_normalize, patchify
from .diffusion import NoiseSchedule, forward_diffuse
from .numerics import gradient_reversal

SIGMA_FLOOR = 1e-4
STUDENT_T_DOF = 5.0


@dataclass
class ModelConfig:
    patch_len: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 1
    max_patches: int = 64
    dropout: float = 0.1
    n_subdomains: int = 2
    cls_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("patch_len", "d_model", "n_heads", "d_ff", "max_patches", "n_subdomains"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


class Dropout(nn.Module):
    """Dropout drawing its masks from an explicitly owned generator.

    The owning client installs its generator with ``set_generator`` so that
    every random draw is part of serializable client state.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    def forward(self, query, memory, mask):
        # mask[i, j] True where query i may look at memory j; every row needs one True
        B, Nq, d = query.shape
        Nk = memory.shape[1]
        h = self.n_heads
        q = self.w_q(query).view(B, Nq, h, d // h).transpose(1, 2)
        k = self.w_k(memory).view(B, Nk, h, d // h).transpose(1, 2)
        v = self.w_v(memory).view(B, Nk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, d)
        return self.w_o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_q = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x, memory, mask):
        x = x + self.drop(self.attn(self.norm_q(x), memory, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class PatchEmbedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.patch_len, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(cfg.max_patches, cfg.d_model) * 0.02)

    def forward(self, patches):
        n = patches.shape[-2]
        if n > self.pos.shape[0]:
            raise ValueError(f"{n} patches exceed max_patches={self.pos.shape[0]}")
        if patches.shape[-1] != self.proj.in_features:
            raise ValueError(
                f"patch length {patches.shape[-1]} != model patch length {self.proj.in_features}"
            )
        return self.proj(patches) + self.pos[:n]


class Encoder(nn.Module):
    """Patch embedding followed by pre-norm causal self-attention blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = PatchEmbedding(cfg)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, tokens):
        mask = causal_mask(tokens.shape[1])
        x = tokens
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


class Decoder(nn.Module):
    """Noisy-patch queries cross-attending to ``[start, H_0 .. H_{N-2}]``.

    Query ``i`` sees the start token and encoder rows strictly before ``i``,
    so a clean patch never leaks into its own reconstruction. When the
    per-patch noise level ``alpha_bar`` is given, a linear embedding of
    ``(sqrt(alpha_bar), sqrt(1 - alpha_bar))`` is added to each query so the
    decoder can tell a pure-noise query from a lightly corrupted one.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = PatchEmbedding(cfg)
        self.level = nn.Linear(2, cfg.d_model)
        self.start = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, noisy_tokens, H, alpha_bar=None):
        B, N, d = H.shape
        start = self.start.expand(B, 1, d)
        memory = torch.cat([start, H[:, : N - 1]], dim=1)
        mask = causal_mask(N)
        x = noisy_tokens
        if alpha_bar is not None:
            ab = torch.as_tensor(alpha_bar, dtype=x.dtype).expand(B, N)
            x = x + self.level(torch.stack([ab.sqrt(), (1.0 - ab).sqrt()], dim=-1))
        for blk in self.blocks:
            x = blk(x, memory, mask)
        return self.norm(x)


class Head(nn.Module):
    def __init__(self, d_model: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, out)

    def forward(self, z):
        return self.fc2(F.gelu(self.fc1(z)))


class MLPClassifier(nn.Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    @property
    def n_classes(self) -> int:
        return self.fc2.out_features

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class FedTRLModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.point_head = Head(cfg.d_model, cfg.patch_len)
        self.prob_head = Head(cfg.d_model, 2 * cfg.patch_len)
        self.subdomain_classifier = MLPClassifier(cfg.d_model, cfg.cls_hidden, cfg.n_subdomains)

    # -- pieces -----------------------------------------------------------
    def embed_patches(self, patches):
        return self.encoder.embed(patches)

    def encode(self, tokens):
        return self.encoder(tokens)

    def decode_denoise(self, noisy_patches, H, alpha_bar=None):
        if noisy_patches.shape[:-1] != H.shape[:-1]:
            raise ValueError("noisy patches and encoder output disagree on (B, N)")
        return self.decoder(self.decoder.embed(noisy_patches), H, alpha_bar)

    def project_point(self, zhat):
        return self.point_head(zhat)

    def project_probabilistic(self, zhat):
        out = self.prob_head(zhat)
        mu, raw = out.chunk(2, dim=-1)
        return mu, F.softplus(raw) + SIGMA_FLOOR

    def classify_subdomain(self, proto, lam: float):
        if proto.shape[-1] != self.subdomain_classifier.fc1.in_features:
            raise ValueError("prototype dimension does not match the classifier")
        return self.subdomain_classifier(gradient_reversal(proto, lam))

    def forward(self, clean, noisy, grl_lambda: float = 1.0, alpha_bar=None):
        """Full training pass on (B, N, P) clean and noisy patch batches."""
        H = self.encode(self.embed_patches(clean))
        proto = pool_prototype(H)
        zhat = self.decode_denoise(noisy, H, alpha_bar)
        mu, sigma = self.project_probabilistic(zhat)
        return {
            "H": H,
            "prototype": proto,
            "zhat": zhat,
            "xhat": self.project_point(zhat),
            "mu": mu,
            "sigma": sigma,
            "logits": self.classify_subdomain(proto, grl_lambda),
        }

    # -- parameter partition ----------------------------------------------
    def encoder_state(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (f"encoder.{k}", v.detach().clone()) for k, v in self.encoder.state_dict().items()
        )

    def load_encoder_state(self, state) -> None:
        own = self.encoder.state_dict()
        stripped = {}
        for k, v in state.items():
            key = k[len("encoder."):] if k.startswith("encoder.") else k
            if key not in own:
                raise KeyError(f"unexpected encoder parameter {k}")
            if tuple(own[key].shape) != tuple(v.shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[key].shape)}")
            stripped[key] = v
        self.encoder.load_state_dict(stripped, strict=True)

    def local_state(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (k, v.detach().clone()) for k, v in self.state_dict().items() if not k.startswith("encoder.")
        )

    def set_generator(self, gen: torch.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.generator = gen

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def pool_prototype(H):
    """Mean over the patch axis (second to last)."""
    if H.shape[-2] < 1:
        raise ValueError("need at least one row to pool")
    return H.mean(dim=-2)


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded re-initialisation that never touches torch's global RNG."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            m.weight.uniform_(-bound, bound, generator=g)
            m.bias.uniform_(-bound, bound, generator=g)
        elif isinstance(m, nn.LayerNorm):
            m.weight.fill_(1.0)
            m.bias.zero_()
        elif isinstance(m, PatchEmbedding):
            m.pos.normal_(0.0, 0.02, generator=g)
        elif isinstance(m, Decoder):
            m.start.normal_(0.0, 0.02, generator=g)


def build_model(cfg: ModelConfig, seed: int) -> FedTRLModel:
    model = FedTRLModel(cfg)
    init_parameters(model, seed)
    return model


# ------------------------------------------------------------------------
# forecasting


@dataclass
class ForecastOutput:
    point: np.ndarray | None
    samples: np.ndarray | None


def student_t_draw(rng: np.random.Generator, mu, sigma, nu: float = STUDENT_T_DOF):
    """Draws whose standard deviation is ``sigma`` (the parametrisation of the NLL)."""
    t = rng.standard_t(nu, size=np.shape(mu))
    return mu + sigma * math.sqrt((nu - 2.0) / nu) * t


@torch.no_grad()
def forecast_batch(
    model: FedTRLModel,
    contexts,
    horizon: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "point",
    n_samples: int = 100,
    feed_back: str = "mean",
    nu: float = STUDENT_T_DOF,
) -> np.ndarray:
    """Autoregressive generation by denoising pure-noise query patches.

    Each step encodes the most recent ``N - 1`` patches plus a placeholder,
    decodes a pure-noise query at the last position and emits either the
    point-head patch or a Student-t draw. The emitted patch is fed back as
    clean history (``feed_back`` picks mu or the draw in samples mode).
    Returns denormalized paths of shape ``(W, horizon)`` for point mode and
    ``(W, n_samples, horizon)`` for samples mode.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if mode not in ("point", "samples"):
        raise ValueError(f"unknown forecast mode {mode!r}")
    if feed_back not in ("mean", "sample"):
        raise ValueError(f"unknown feed_back {feed_back!r}")
    P = model.cfg.patch_len
    normed = [instance_normalize(c) for c in contexts]
    hist = np.stack([patchify(x, P) for x, _ in normed])  # (W, N, P)
    W, N, _ = hist.shape
    reps = 1 if mode == "point" else n_samples
    B = W * reps
    window = min(N, model.cfg.max_patches)
    history = torch.as_tensor(np.repeat(hist, reps, axis=0))
    was_training = model.training
    model.eval()
    emitted = []
    for _ in range(-(-horizon // P)):
        past = history[:, history.shape[1] - (window - 1):] if window > 1 else history[:, :0]
        clean = torch.cat([past, torch.zeros(B, 1, P)], dim=1)
        eps = rng.standard_normal((B, 1, P))
        query = forward_diffuse(np.zeros((B, 1, P)), schedule.steps, eps, schedule)
        noisy = torch.cat([past, torch.as_tensor(query)], dim=1)
        # history positions are clean (alpha_bar = 1), the query is pure noise
        ab = torch.ones(B, noisy.shape[1])
        ab[:, -1] = float(schedule.alpha_bar[schedule.steps])
        H = model.encode(model.embed_patches(clean))
        zhat = model.decode_denoise(noisy, H, ab)[:, -1:]
        if mode == "point":
            out = nxt = model.project_point(zhat)
        else:
            mu, sigma = model.project_probabilistic(zhat)
            out = torch.as_tensor(student_t_draw(rng, mu.numpy(), sigma.numpy(), nu))
            nxt = mu if feed_back == "mean" else out
        emitted.append(out[:, 0])
        history = torch.cat([history, nxt], dim=1)
    model.train(was_training)
    paths = torch.cat(emitted, dim=-1)[:, :horizon].numpy().reshape(W, reps, horizon)
    for i, (_, stats) in enumerate(normed):
        paths[i] = instance_denormalize(paths[i], stats)
    return paths[:, 0] if mode == "point" else paths


def forecast(
    model: FedTRLModel,
    context,
    horizon: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "point",
    n_samples: int = 100,
    feed_back: str = "mean",
    nu: float = STUDENT_T_DOF,
) -> ForecastOutput:
    paths = forecast_batch(model, [context], horizon, schedule, rng, mode, n_samples, feed_back, nu)
    if mode == "point":
        return ForecastOutput(point=paths[0], samples=None)
    return ForecastOutput(point=None, samples=paths[0])
