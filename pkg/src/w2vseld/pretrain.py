"""Self-supervised pre-training: masked contrastive prediction plus codebook diversity.

    L = L_m + alpha * L_d

L_m is an InfoNCE loss over cosine similarities between the context vector at
each masked frame and K+1 quantized candidates (the true target and K
distractors from other masked frames of the same utterance). L_d rewards
uniform use of every codebook entry.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ambisonics import AmbisonicClip, resample, standardize
from .dataset import SAMPLE_RATE
from .errors import ConfigError, NumericalError
from .model import (ModelConfig, W2vSeld, conv_output_length, gumbel_temperature,
                    load_checkpoint, save_checkpoint, span_mask, state_tensors)

log = logging.getLogger(__name__)

COSINE_FLOOR = 1e-8
LOG_FIELDS = ("step", "lr", "L_total", "L_m", "L_d", "mask_fraction", "codebook_perplexity")


@dataclass
class PretrainConfig:
    alpha: float = 0.1
    num_distractors: int = 100
    logit_temperature: float = 0.1
    warmup_updates: int = 32000
    peak_lr: float = 5e-4
    total_updates: int = 400000
    batch_samples: int = 1_400_000
    window_samples: int = 64000
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    clip_norm: float = 10.0
    log_every: int = 1
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        problems = []
        if self.num_distractors < 1:
            problems.append("num_distractors must be >= 1")
        if self.logit_temperature <= 0:
            problems.append("logit_temperature must be positive")
        if self.alpha < 0:
            problems.append("alpha must be non-negative")
        if self.total_updates < 1 or self.warmup_updates < 0:
            problems.append("total_updates must be positive and warmup_updates non-negative")
        if self.window_samples < 400:
            problems.append("window_samples shorter than the encoder receptive field")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def toy(cls, **overrides):
        params = dict(num_distractors=10, warmup_updates=200, total_updates=1000,
                      batch_samples=256000, checkpoint_every=500)
        params.update(overrides)
        return cls(**params)


# -- losses ------------------------------------------------------------------


def cosine_similarity(a, b):
    na = a.norm(dim=-1).clamp_min(COSINE_FLOOR)
    nb = b.norm(dim=-1).clamp_min(COSINE_FLOOR)
    return (a * b).sum(-1) / (na * nb)


def info_nce(context, positives, distractors, temperature):
    """Mean of ``-log softmax(cos / temperature)[0]`` with the positive first.

    context, positives: ``[n, D]``; distractors: ``[n, K, D]``.
    """
    candidates = torch.cat([positives.unsqueeze(1), distractors], dim=1)
    logits = cosine_similarity(context.unsqueeze(1), candidates) / temperature
    return F.cross_entropy(logits, torch.zeros(len(logits), dtype=torch.long, device=logits.device))


def sample_distractor_indices(mask, K, generator=None):
    """For every masked frame, ``K`` frame indices of other masked frames in its row.

    Returns ``(rows, cols, distractor_cols [n, K])``. Draws are uniform with
    replacement and never hit the positive's own index. When a row has a single
    masked frame, distractors come from all of that row's other frames.
    """
    rows, cols, dist = [], [], []
    for b in range(mask.shape[0]):
        idx = torch.nonzero(mask[b]).flatten()
        n = len(idx)
        if n == 0:
            continue
        pool = idx if n > 1 else torch.arange(mask.shape[1])
        m = len(pool)
        pos_in_pool = torch.searchsorted(pool, idx)
        draw = torch.randint(0, m - 1, (n, K), generator=generator)
        draw = draw + (draw >= pos_in_pool.unsqueeze(1)).long()
        rows.append(torch.full((n,), b, dtype=torch.long))
        cols.append(idx)
        dist.append(pool[draw])
    return torch.cat(rows), torch.cat(cols), torch.cat(dist)


def contrastive_logits(c, q, mask, K, temperature, generator=None):
    """Candidate logits ``[n_masked, K+1]`` for ``c, q: [B, T, D]``; column 0 is the positive."""
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    rows, cols, dist = sample_distractor_indices(mask, K, generator)
    context = c[rows, cols]
    candidates = torch.cat([q[rows, cols].unsqueeze(1), q[rows.unsqueeze(1), dist]], dim=1)
    return cosine_similarity(context.unsqueeze(1), candidates) / temperature


def contrastive_loss(c, q, mask, K, temperature, generator=None):
    logits = contrastive_logits(c, q, mask, K, temperature, generator)
    return F.cross_entropy(logits, torch.zeros(len(logits), dtype=torch.long))


def contrastive_accuracy(c, q, mask, K, temperature, generator=None) -> float:
    logits = contrastive_logits(c, q, mask, K, temperature, generator)
    return float((logits.argmax(dim=1) == 0).double().mean())


def group_perplexity(probs):
    """``exp(H(mean p))`` per group for soft assignments ``[..., G, V]``."""
    mean = probs.reshape(-1, *probs.shape[-2:]).mean(dim=0)
    entropy = -torch.special.xlogy(mean, mean).sum(dim=-1)
    return entropy.exp()


def diversity_loss(probs):
    """``(1 / GV) * sum_g (V - exp(H(mean p_g)))``."""
    G, V = probs.shape[-2:]
    return (V - group_perplexity(probs)).sum() / (G * V)


def lr_schedule(step: int, cfg: PretrainConfig) -> float:
    """Linear warm-up to the peak, then linear decay to zero at ``total_updates``."""
    if step < cfg.warmup_updates:
        return cfg.peak_lr * step / cfg.warmup_updates
    span = max(1, cfg.total_updates - cfg.warmup_updates)
    return cfg.peak_lr * max(0.0, (cfg.total_updates - step) / span)


def pretrain_terms(model: W2vSeld, batch: dict, cfg: PretrainConfig, hard: bool = True):
    """Loss terms for one batch: ``x [B, 4, L]``, ``mask [B, T]``, ``temperature``, ``seed``."""
    gen = torch.Generator().manual_seed(int(batch["seed"]))
    out = model.pretrain_forward(batch["x"], batch["mask"], batch["temperature"], generator=gen, hard=hard)
    mask = batch["mask"]
    l_m = contrastive_loss(out["c_proj"], out["q"].quantized, mask, cfg.num_distractors,
                           cfg.logit_temperature, gen)
    probs = out["q"].probs[mask]
    l_d = diversity_loss(probs)
    return {
        "total": l_m + cfg.alpha * l_d,
        "contrastive": l_m,
        "diversity": l_d,
        "perplexity": group_perplexity(probs).mean().detach(),
    }


# -- loop --------------------------------------------------------------------


def prepare_clip(clip: AmbisonicClip) -> AmbisonicClip:
    if clip.sample_rate_hz != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    return standardize(clip)


def pretrain_windows(clips, window_samples: int):
    """All consecutive windows of every clip as ``(samples [4, L] float32, valid_samples)``."""
    out = []
    for clip in clips:
        clip = prepare_clip(clip)
        n = clip.num_samples
        for start in range(0, max(n, 1), window_samples):
            chunk = np.zeros((4, window_samples), dtype=np.float32)
            piece = clip.samples[:, start:start + window_samples]
            chunk[:, :piece.shape[1]] = piece
            out.append((chunk, piece.shape[1]))
    return out


def make_batch(windows, step: int, model_cfg: ModelConfig, cfg: PretrainConfig):
    rng = np.random.default_rng([cfg.seed, step])
    B = max(1, cfg.batch_samples // cfg.window_samples)
    picks = rng.choice(len(windows), size=B, replace=len(windows) < B)
    T = conv_output_length(cfg.window_samples, model_cfg.conv_kernels, model_cfg.conv_strides)
    masks = []
    for i in picks:
        valid = 320 * np.arange(T) + 400 <= windows[i][1]
        m = span_mask(T, model_cfg.mask_prob, model_cfg.mask_span, rng, valid=valid)
        if m.sum() < 2:
            # guarantee at least one span so the contrastive term is defined
            start = rng.integers(0, max(1, int(valid.sum()) - model_cfg.mask_span + 1))
            m[start:start + model_cfg.mask_span] = True
            m &= valid if valid.sum() >= 2 else np.ones(T, dtype=bool)
        masks.append(m)
    x = torch.from_numpy(np.stack([windows[i][0] for i in picks]))
    return {
        "x": x,
        "mask": torch.from_numpy(np.stack(masks)),
        "temperature": gumbel_temperature(step, model_cfg, cfg.total_updates),
        "seed": int(rng.integers(2**62)),
    }


@dataclass
class PretrainResult:
    model: W2vSeld
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def build_optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=0.0, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def checkpoint_meta(kind, step, model_cfg, **extra):
    meta = {"kind": kind, "step": step, "model_config": model_cfg.to_dict()}
    meta.update(extra)
    return meta


def pretrain_loop(clips, model_cfg: ModelConfig, cfg: PretrainConfig, out_dir=None,
                  steps: int | None = None, model: W2vSeld | None = None) -> PretrainResult:
    """Run ``steps`` (default ``cfg.total_updates``) pre-training updates.

    ``clips`` are :class:`AmbisonicClip` objects; annotations are never used.
    With ``out_dir`` set, writes ``pretrain_log.csv`` and checkpoints
    ``pretrain_<step>.json/.bin``.
    """
    torch.manual_seed(cfg.seed)
    model = model or W2vSeld(model_cfg)
    model.train()
    windows = pretrain_windows(clips, cfg.window_samples)
    optimizer = build_optimizer(model.parameters(), cfg)
    steps = cfg.total_updates if steps is None else steps
    result = PretrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "pretrain_log.csv", "w", newline="")
        writer = csv.DictWriter(log_file, LOG_FIELDS)
        writer.writeheader()

    def checkpoint(step):
        if out_dir is not None:
            path = save_checkpoint(out_dir / f"pretrain_{step:06d}", state_tensors(model),
                                   checkpoint_meta("pretrain", step, model_cfg, pretrain_config=asdict(cfg)))
            result.checkpoints.append(path)

    step = 0
    try:
        for step in range(steps):
            lr = lr_schedule(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = make_batch(windows, step, model_cfg, cfg)
            optimizer.zero_grad(set_to_none=True)
            terms = pretrain_terms(model, batch, cfg)
            for name, value in terms.items():
                if not torch.isfinite(value):
                    raise NumericalError(f"non-finite {name} loss at step {step}", term=name)
            terms["total"].backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            row = {
                "step": step, "lr": lr,
                "L_total": float(terms["total"].detach()), "L_m": float(terms["contrastive"].detach()),
                "L_d": float(terms["diversity"].detach()),
                "mask_fraction": float(batch["mask"].double().mean()),
                "codebook_perplexity": float(terms["perplexity"]),
            }
            result.log.append(row)
            if writer is not None and step % cfg.log_every == 0:
                writer.writerow(row)
            if (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step + 1)
        if not result.checkpoints or not str(result.checkpoints[-1]).endswith(f"{steps:06d}.json"):
            checkpoint(steps)
    except NumericalError:
        log.error("pre-training diverged at step %d; last good checkpoint kept", step)
        raise
    except KeyboardInterrupt:
        checkpoint(step)
        raise
    finally:
        if log_file is not None:
            log_file.close()
    return result


def load_pretrained(path, model_cfg: ModelConfig | None = None) -> W2vSeld:
    """Rebuild a body from a pre-training checkpoint.

    A ``model_cfg`` that differs from the stored one raises :class:`ConfigError`
    naming every differing field.
    """
    from .model import load_state

    tensors, meta = load_checkpoint(path)
    stored = ModelConfig.from_dict(meta["model_config"])
    if model_cfg is not None:
        diffs = config_differences(stored, model_cfg)
        if diffs:
            raise ConfigError(diffs)
    body = W2vSeld(stored)
    prefix = "body." if any(k.startswith("body.") for k in tensors) else ""
    load_state(body, tensors, prefix)
    return body


def config_differences(stored, requested) -> list[str]:
    out = []
    for f in fields(stored):
        a, b = getattr(stored, f.name), getattr(requested, f.name)
        if a != b:
            out.append(f"{f.name}: checkpoint has {a!r}, config has {b!r}")
    return out


def masked_prediction_accuracy(model: W2vSeld, clips, model_cfg: ModelConfig, cfg: PretrainConfig,
                               seed: int = 12345) -> float:
    """Fraction of masked frames whose positive candidate scores highest."""
    windows = pretrain_windows(clips, cfg.window_samples)
    model.eval()
    hits = total = 0
    with torch.no_grad():
        for i, (chunk, valid_samples) in enumerate(windows):
            rng = np.random.default_rng([seed, i])
            T = conv_output_length(cfg.window_samples)
            valid = 320 * np.arange(T) + 400 <= valid_samples
            mask = torch.from_numpy(span_mask(T, model_cfg.mask_prob, model_cfg.mask_span, rng, valid=valid))[None]
            if mask.sum() < 2:
                continue
            out = model.pretrain_forward(torch.from_numpy(chunk)[None], mask, model_cfg.gumbel_temp_min)
            logits = contrastive_logits(out["c_proj"], out["q"].quantized, mask, cfg.num_distractors,
                                        cfg.logit_temperature, torch.Generator().manual_seed(seed + i))
            hits += int((logits.argmax(1) == 0).sum())
            total += len(logits)
    model.train()
    return hits / max(total, 1)
