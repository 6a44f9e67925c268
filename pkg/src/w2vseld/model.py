"""The w2v-SELD network body.

Raw 4-channel waveform -> 7-block convolutional feature encoder (20 ms hop at
16 kHz) -> projection, span masking, relative positional convolution ->
pre-norm transformer. A product Gumbel-softmax quantizer turns the unmasked
latents into the discrete targets used during pre-training.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericalError


@dataclass
class ModelConfig:
    conv_channels: int = 512
    conv_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    conv_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    input_channels: int = 4
    num_layers: int = 12
    num_heads: int = 8
    embed_dim: int = 768
    ffn_dim: int = 3072
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    quantizer_groups: int = 2
    codebook_size: int = 320
    quantized_dim: int = 256
    gumbel_temp_max: float = 2.0
    gumbel_temp_min: float = 0.5
    mask_prob: float = 0.065
    mask_span: int = 10
    dropout: float = 0.1

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        problems = []
        if len(self.conv_kernels) != len(self.conv_strides):
            problems.append("conv_kernels and conv_strides differ in length")
        if math.prod(self.conv_strides) != 320:
            problems.append(f"conv strides multiply to {math.prod(self.conv_strides)}, expected 320")
        if self.embed_dim % self.num_heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % self.pos_conv_groups:
            problems.append("embed_dim not divisible by pos_conv_groups")
        if self.quantized_dim % self.quantizer_groups:
            problems.append("quantized_dim not divisible by quantizer_groups")
        if self.gumbel_temp_min <= 0 or self.gumbel_temp_max <= 0:
            problems.append("Gumbel temperatures must be positive")
        if not 0.0 <= self.mask_prob <= 1.0:
            problems.append("mask_prob must lie in [0, 1]")
        if self.mask_span < 1:
            problems.append("mask_span must be >= 1")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def base(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def large(cls, **overrides):
        params = dict(num_layers=24, num_heads=16, embed_dim=1024, ffn_dim=4096, quantized_dim=768)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def toy(cls, **overrides):
        params = dict(conv_channels=64, num_layers=2, num_heads=4, embed_dim=64, ffn_dim=256,
                      pos_conv_kernel=8, pos_conv_groups=4, codebook_size=16, quantized_dim=32,
                      dropout=0.0)
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown model key {k!r}" for k in unknown])
        return cls(**d)


def receptive_field(kernels=ModelConfig.conv_kernels, strides=ModelConfig.conv_strides) -> int:
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


def conv_output_length(L: int, kernels=ModelConfig.conv_kernels, strides=ModelConfig.conv_strides) -> int:
    """Number of encoder frames produced from ``L`` input samples."""
    if L < receptive_field(kernels, strides):
        raise DataError(f"input of {L} samples is shorter than the {receptive_field(kernels, strides)}-sample receptive field")
    T = L
    for k, s in zip(kernels, strides):
        T = (T - k) // s + 1
    return T


def span_mask(T: int, p: float, M: int, seed=None, valid=None) -> np.ndarray:
    """Boolean mask: every frame starts a span of ``M`` frames with probability ``p``.

    Spans may overlap and are clipped at the sequence end. ``seed`` may be an int
    or a ``numpy.random.Generator``. Frames outside ``valid`` are never masked.
    """
    if T <= M:
        raise ValueError(f"sequence of {T} frames is not longer than the span {M}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    starts = rng.random(T) < p
    # frame t is masked iff some start lies in (t - M, t]
    cover = np.convolve(starts.astype(np.int64), np.ones(M, dtype=np.int64))[:T]
    mask = cover > 0
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    return mask


def gumbel_temperature(step: int, cfg: ModelConfig, total_updates: int) -> float:
    """Multiplicative annealing that reaches the floor at 80% of ``total_updates``."""
    horizon = max(1, int(0.8 * total_updates))
    decay = (cfg.gumbel_temp_min / cfg.gumbel_temp_max) ** (1.0 / horizon)
    return max(cfg.gumbel_temp_max * decay**step, cfg.gumbel_temp_min)


# -- building blocks ---------------------------------------------------------


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a ``[B, C, T]`` tensor."""

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class FeatureEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        blocks = []
        c_in = cfg.input_channels
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            conv = nn.Conv1d(c_in, cfg.conv_channels, k, stride=s)
            nn.init.kaiming_uniform_(conv.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            blocks.append(nn.Sequential(conv, ChannelLayerNorm(cfg.conv_channels), nn.GELU()))
            c_in = cfg.conv_channels
        self.blocks = nn.ModuleList(blocks)
        self.output_norm = nn.LayerNorm(cfg.conv_channels)

    def forward(self, x):
        """``[B, 4, L]`` -> ``[B, T, conv_channels]``."""
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activation after conv block {i}", term=f"conv{i}")
        return self.output_norm(x.transpose(1, 2))


class PositionalConv(nn.Module):
    """Grouped temporal convolution producing relative positional embeddings."""

    def __init__(self, dim, kernel, groups):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)
        nn.init.normal_(self.conv.weight, mean=0.0, std=math.sqrt(4.0 / (kernel * dim)))
        nn.init.zeros_(self.conv.bias)
        self.trim = kernel % 2 == 0

    def forward(self, x):
        y = self.conv(x.transpose(1, 2))
        if self.trim:
            y = y[:, :, :-1]
        return F.gelu(y).transpose(1, 2)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x):
        B, T, D = x.shape
        h = self.heads

        def split(t):
            return t.view(B, T, h, D // h).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // h)
        weights = F.dropout(scores.softmax(dim=-1), self.dropout, self.training)
        out = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out_proj(out)


class TransformerLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)
        self.dropout = dropout

    def forward(self, x):
        x = x + F.dropout(self.attn(self.attn_norm(x)), self.dropout, self.training)
        y = self.ffn_out(F.gelu(self.ffn_in(self.ffn_norm(x))))
        return x + F.dropout(y, self.dropout, self.training)


def gumbel_softmax(logits, temperature, hard=True, noise=None, generator=None):
    """Gumbel-softmax over the last axis.

    With ``hard`` the forward value is one-hot while the gradient is that of the
    soft sample (straight-through). ``noise=False`` disables the Gumbel noise.
    Returns ``(sample, soft_sample)``.
    """
    if temperature <= 0:
        raise ConfigError(f"Gumbel temperature must be positive, got {temperature}")
    if noise is None:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
        noise = -torch.log((-torch.log(u.clamp_min(1e-10))).clamp_min(1e-10))
    elif noise is False:
        noise = torch.zeros_like(logits)
    soft = ((logits + noise) / temperature).softmax(dim=-1)
    if not hard:
        return soft, soft
    index = soft.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return one_hot - soft.detach() + soft, soft


@dataclass
class QuantizerOutput:
    quantized: torch.Tensor  # [..., quantized_dim]
    probs: torch.Tensor  # [..., G, V] softmax of logits, no noise
    indices: torch.Tensor  # [..., G]


class GumbelQuantizer(nn.Module):
    """Product quantizer: G codebooks of V entries, concatenated then projected."""

    def __init__(self, in_dim, groups, entries, out_dim):
        super().__init__()
        self.groups, self.entries = groups, entries
        code_dim = out_dim // groups
        self.to_logits = nn.Linear(in_dim, groups * entries)
        nn.init.normal_(self.to_logits.weight, std=1.0)
        nn.init.zeros_(self.to_logits.bias)
        self.codebooks = nn.Parameter(torch.empty(groups, entries, code_dim).uniform_(-1, 1) / math.sqrt(code_dim))
        self.project = nn.Linear(groups * code_dim, out_dim)
        nn.init.normal_(self.project.weight, std=0.02)
        nn.init.zeros_(self.project.bias)

    def logits(self, z):
        return self.to_logits(z).unflatten(-1, (self.groups, self.entries))

    def forward(self, z, temperature, hard=True, stochastic=True, generator=None):
        logits = self.logits(z)
        noise = None if stochastic else False
        sample, _ = gumbel_softmax(logits, temperature, hard=hard, noise=noise, generator=generator)
        # [..., G, V] x [G, V, d] -> [..., G, d]
        selected = torch.einsum("...gv,gvd->...gd", sample, self.codebooks)
        quantized = self.project(selected.flatten(-2))
        return QuantizerOutput(quantized, logits.softmax(dim=-1), sample.argmax(dim=-1))


class W2vSeld(nn.Module):
    """Encoder + context network + quantizer. Heads live in :mod:`w2vseld.finetune`."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_encoder = FeatureEncoder(cfg)
        self.post_proj = nn.Linear(cfg.conv_channels, cfg.embed_dim)
        self.mask_emb = nn.Parameter(torch.empty(cfg.embed_dim).uniform_())
        self.pos_conv = PositionalConv(cfg.embed_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.embed_dim, cfg.num_heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.quantizer = GumbelQuantizer(cfg.conv_channels, cfg.quantizer_groups, cfg.codebook_size, cfg.quantized_dim)
        self.final_proj = nn.Linear(cfg.embed_dim, cfg.quantized_dim)
        for module in self.modules():
            if isinstance(module, nn.Linear) and module not in (self.quantizer.to_logits, self.quantizer.project):
                nn.init.normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)

    def encode(self, x):
        return self.feature_encoder(x)

    def contextualize(self, z, mask=None):
        """Latents ``[B, T, conv_channels]`` -> context ``[B, T, embed_dim]``.

        Rows where ``mask`` is true are replaced by the learned mask embedding.
        """
        x = self.post_proj(z)
        if mask is not None:
            x = torch.where(mask.unsqueeze(-1), self.mask_emb.to(x.dtype), x)
        x = x + self.pos_conv(x)
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)

    def forward(self, x, mask=None):
        return self.contextualize(self.encode(x), mask)

    def pretrain_forward(self, x, mask, temperature, generator=None, hard=True):
        z = self.encode(x)
        c = self.contextualize(z, mask)
        q = self.quantizer(z, temperature, hard=hard, stochastic=self.training, generator=generator)
        return {"z": z, "c": c, "c_proj": self.final_proj(c), "q": q}


# -- gradients ---------------------------------------------------------------


def forward_backward(model: nn.Module, batch, loss_fn):
    """Evaluate ``loss_fn(model, batch)`` and back-propagate.

    ``loss_fn`` returns a dict of named scalar terms including ``"total"``.
    Returns ``(terms as floats, {parameter name: gradient})``; parameters the
    loss does not reach get zero gradients.
    """
    model.zero_grad(set_to_none=True)
    terms = loss_fn(model, batch)
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericalError(f"non-finite loss term {name!r}", term=name)
    total = terms["total"]
    if total.requires_grad:
        total.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return {k: float(v.detach()) for k, v in terms.items()}, grads


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, tensors: dict, meta: dict):
    """Write ``<path>.json`` (metadata + tensor index) and ``<path>.bin`` (raw <f4)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(_as_numpy(t), dtype="<f4")
            fh.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    doc = dict(meta)
    doc["tensors"] = index
    doc["data_file"] = path.with_suffix(".bin").name
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path.with_suffix(".json")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(tensors as float32 arrays, meta)``."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        doc = json.loads(path.read_text())
        raw = (path.parent / doc["data_file"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors = {}
    for entry in doc.pop("tensors"):
        buf = raw[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return tensors, doc


def _as_numpy(t):
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def state_tensors(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state(module: nn.Module, tensors: dict, prefix: str = "", strict: bool = True):
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    own = module.state_dict()
    problems = []
    for k, v in own.items():
        if k not in state:
            if strict:
                problems.append(f"missing tensor {prefix + k}")
        elif tuple(state[k].shape) != tuple(v.shape):
            problems.append(f"tensor {prefix + k}: shape {tuple(state[k].shape)} != {tuple(v.shape)}")
    if problems:
        raise ConfigError(problems)
    with torch.no_grad():
        for k, v in own.items():
            if k in state:
                v.copy_(state[k].to(v.dtype))
