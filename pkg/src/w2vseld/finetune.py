"""Fine-tuning the body with SED and DOA heads.

Two prediction modes:

* ``segpred``: 100 ms windows, context vectors mean-pooled over time, one
  prediction per window.
* ``framepred``: 2.97 s windows, one prediction per 20 ms encoder frame;
  :func:`postprocess` folds five frames into each 100 ms output segment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ambisonics import rotation_table
from .annotation import SeldAnnotation
from .dataset import (LABEL_HOP_SAMPLES, extract_window, rasterize, segment_targets,
                      window_iter)
from .errors import ConfigError, DataError, NumericalError
from .metrics import MetricsReport, evaluate_pairs
from .model import (ModelConfig, W2vSeld, load_checkpoint, load_state, save_checkpoint, state_tensors)
from .pretrain import build_optimizer, checkpoint_meta, config_differences, prepare_clip

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr_body", "lr_heads", "L_total", "L_sed", "L_doa")
SEGMENTS_PER_FRAMEPRED_WINDOW = 29  # 29 x 100 ms fit in the 148 frames of a 2.97 s window


@dataclass
class FinetuneConfig:
    mode: str = "framepred"
    body_lr: float = 5e-5
    sed_lr: float = 5e-4
    doa_lr: float = 5e-4
    stage_fractions: tuple = (0.10, 0.30, 0.60)
    final_lr_scale: float = 0.05
    freeze_body: bool = False
    sed_threshold: float = 0.5
    w_sed: float = 1.0
    w_doa: float = 5.0
    time_masks: int = 2
    time_mask_max: int = 20
    channel_masks: int = 2
    channel_mask_max: int = 64
    spec_augment: bool = True
    rotate: bool = True
    traditional: bool = True
    gain_db: float = 6.0
    noise_snr_db: tuple = (10.0, 30.0)
    total_updates: int = 2000
    batch_size: int = 8
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    clip_norm: float = 10.0
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.stage_fractions = tuple(self.stage_fractions)
        self.noise_snr_db = tuple(self.noise_snr_db)
        self.betas = tuple(self.betas)
        problems = []
        if self.mode not in ("framepred", "segpred"):
            problems.append(f"mode must be framepred or segpred, got {self.mode!r}")
        if len(self.stage_fractions) != 3 or abs(sum(self.stage_fractions) - 1.0) > 1e-9:
            problems.append("stage_fractions must be three numbers summing to 1")
        if not 0.0 < self.sed_threshold < 1.0:
            problems.append("sed_threshold must lie in (0, 1)")
        if self.total_updates < 1 or self.batch_size < 1:
            problems.append("total_updates and batch_size must be positive")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def toy(cls, **overrides):
        params = dict(channel_mask_max=8)
        params.update(overrides)
        return cls(**params)


# -- model -------------------------------------------------------------------


class SeldModel(nn.Module):
    def __init__(self, body: W2vSeld, num_classes: int, mode: str = "framepred"):
        super().__init__()
        self.body = body
        self.num_classes = num_classes
        self.mode = mode
        dim = body.cfg.embed_dim
        self.sed_head = nn.Linear(dim, num_classes)
        self.doa_head = nn.Linear(dim, 3 * num_classes)

    def heads(self, c):
        return self.sed_head(c), torch.tanh(self.doa_head(c))

    def forward(self, x, stripes=None):
        """``x [B, 4, L]`` -> ``(sed_logits, doa)``.

        framepred: ``[B, T, N]`` and ``[B, T, 3N]``; segpred: ``[B, N]`` and ``[B, 3N]``.
        ``stripes`` is a per-item list of ``(time_stripes, channel_stripes)``
        zeroed in the encoder output (training only).
        """
        z = self.body.encode(x)
        if stripes is not None:
            z = apply_stripes(z, stripes)
        c = self.body.contextualize(z)
        if self.mode == "segpred":
            c = c.mean(dim=1)
        return self.heads(c)


def body_parameters(model: SeldModel):
    """Parameters up to the transformer output; quantizer and pre-training projection excluded."""
    skip = ("quantizer.", "final_proj.", "mask_emb")
    return [p for n, p in model.body.named_parameters() if not n.startswith(skip)]


# -- losses ------------------------------------------------------------------


def seld_loss(sed_logits, doa, sed_target, doa_target, active_mask, valid=None, w_sed=1.0, w_doa=5.0):
    """``w_sed * mean BCE + w_doa * masked MSE``; returns a dict of terms.

    BCE averages over every valid (frame, class) entry; MSE averages over the
    DOA coordinates of active classes only. No active entries -> DOA term 0.
    """
    if valid is None:
        valid = torch.ones(sed_target.shape[:-1], dtype=torch.bool)
    v = valid.unsqueeze(-1).to(sed_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(sed_logits, sed_target, reduction="none")
    l_sed = (bce * v).sum() / (v.sum() * sed_target.shape[-1]).clamp_min(1)
    weight = active_mask * v
    count = weight.sum()
    if count > 0:
        l_doa = (((doa - doa_target) ** 2) * weight).sum() / count
    else:
        l_doa = doa.sum() * 0.0
    return {"total": w_sed * l_sed + w_doa * l_doa, "sed": l_sed, "doa": l_doa}


# -- schedule ----------------------------------------------------------------


def tri_stage_lr(step, total, base, fractions=(0.10, 0.30, 0.60), final_scale=0.05):
    """Linear warm-up, constant hold, then exponential decay to ``base * final_scale``."""
    warm = fractions[0] * total
    hold = warm + fractions[1] * total
    if step < warm:
        return base * step / warm
    if step < hold:
        return base
    decay_span = max(total - hold, 1e-12)
    progress = min(1.0, (step - hold) / decay_span)
    return base * math.exp(math.log(final_scale) * progress)


# -- augmentation ------------------------------------------------------------


def sample_stripes(T, C, cfg: FinetuneConfig, rng):
    """Random time and channel stripes, widths uniform in ``[0, max]``."""

    def draw(n, max_width, size):
        out = []
        for _ in range(n):
            w = int(rng.integers(0, min(max_width, size) + 1))
            start = int(rng.integers(0, size - w + 1))
            out.append((start, w))
        return out

    return draw(cfg.time_masks, cfg.time_mask_max, T), draw(cfg.channel_masks, cfg.channel_mask_max, C)


def apply_stripes(z, stripes):
    """Zero stripes in ``z [B, T, C]`` (or ``[T, C]`` with a single stripe pair)."""
    single = z.dim() == 2
    if single:
        z, stripes = z.unsqueeze(0), [stripes]
    keep = torch.ones_like(z)
    for b, (time_stripes, chan_stripes) in enumerate(stripes):
        for start, w in time_stripes:
            keep[b, start:start + w, :] = 0
        for start, w in chan_stripes:
            keep[b, :, start:start + w] = 0
    out = z * keep
    return out[0] if single else out


def spec_augment_embed(z, cfg: FinetuneConfig, seed):
    """Time/channel stripe masking of one encoder output ``[T, C]``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stripes = sample_stripes(z.shape[0], z.shape[1], cfg, rng)
    return apply_stripes(z, stripes)


def rotate_doa(doa_flat, matrix, num_classes):
    """Apply ``matrix`` to every class triplet of a ``[..., 3N]`` DOA array."""
    N = num_classes
    vec = doa_flat.reshape(*doa_flat.shape[:-1], 3, N)
    out = np.einsum("ij,...jn->...in", matrix, vec)
    return out.reshape(doa_flat.shape)


def pink_noise(shape, rng):
    n = shape[-1]
    spectrum = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1] if n > 1 else 1.0
    sig = np.fft.irfft(spectrum / np.sqrt(freqs), n, axis=-1)
    return sig / max(np.sqrt(np.mean(sig**2)), 1e-12)


def augment_example(x, doa, num_classes, cfg: FinetuneConfig, rng):
    """Rotation plus gain/noise on one window; DOA labels co-rotated, SED untouched."""
    x = x.copy()
    doa = doa.copy()
    if cfg.rotate:
        t = rotation_table()[int(rng.integers(8))]
        (sx, gx), (sy, gy) = t.channel_ops
        src = x.copy()
        x[1], x[2] = gx * src[sx], gy * src[sy]
        doa = rotate_doa(doa, t.label_matrix, num_classes)
    if cfg.traditional:
        x *= 10.0 ** (rng.uniform(-cfg.gain_db, cfg.gain_db) / 20.0)
        power = float(np.mean(x**2))
        if power > 0:
            snr = rng.uniform(*cfg.noise_snr_db)
            noise = pink_noise(x.shape, rng) if rng.random() < 0.5 else rng.standard_normal(x.shape)
            x += noise * np.sqrt(power * 10.0 ** (-snr / 10.0))
    return x.astype(np.float32), doa


# -- data --------------------------------------------------------------------


@dataclass
class TrainingExample:
    x: np.ndarray  # [4, L] float32
    sed: np.ndarray
    doa: np.ndarray
    mask: np.ndarray
    valid: np.ndarray


def training_examples(items, mode: str):
    """Windows and targets of labelled corpus items (``CorpusItem`` or ``(clip, ann)``)."""
    out = []
    for item in items:
        clip, ann = (item.clip, item.annotation) if hasattr(item, "clip") else item
        if ann is None:
            raise DataError("fine-tuning needs annotated clips")
        clip = prepare_clip(clip)
        for w in window_iter(clip, mode):
            x = extract_window(clip, w).astype(np.float32)
            if mode == "framepred":
                tg = rasterize(ann, w, 20)
                out.append(TrainingExample(x, tg.sed, tg.doa, tg.active_mask, tg.valid))
            else:
                sed, doa, mask = segment_targets(ann, w)
                out.append(TrainingExample(x, sed, doa, mask, np.array(True)))
    return out


def collate(examples, num_classes, cfg, rng, augment=True):
    xs, doas = [], []
    for ex in examples:
        if augment:
            x, doa = augment_example(ex.x, ex.doa, num_classes, cfg, rng)
        else:
            x, doa = ex.x, ex.doa
        xs.append(x)
        doas.append(doa)
    as_t = lambda arrs, dt=torch.float32: torch.from_numpy(np.stack(arrs)).to(dt)
    return {
        "x": as_t(xs),
        "sed": as_t([e.sed for e in examples]),
        "doa": as_t(doas),
        "mask": as_t([e.mask for e in examples]),
        "valid": as_t([e.valid for e in examples], torch.bool),
    }


# -- loop --------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: SeldModel
    log: list = field(default_factory=list)
    checkpoint: Path | None = None


def build_seld_model(model_cfg: ModelConfig, num_classes: int, mode: str, pretrained=None, seed: int = 0):
    """Heads on top of a fresh body or a pre-trained one (checkpoint path or :class:`W2vSeld`)."""
    torch.manual_seed(seed)
    if pretrained is None:
        body = W2vSeld(model_cfg)
    elif isinstance(pretrained, W2vSeld):
        diffs = config_differences(pretrained.cfg, model_cfg)
        if diffs:
            raise ConfigError(diffs)
        body = pretrained
    else:
        tensors, meta = load_checkpoint(pretrained)
        diffs = config_differences(ModelConfig.from_dict(meta["model_config"]), model_cfg)
        if diffs:
            raise ConfigError(diffs)
        body = W2vSeld(model_cfg)
        prefix = "body." if meta.get("kind") == "finetune" else ""
        load_state(body, tensors, prefix)
    torch.manual_seed(seed + 1)
    return SeldModel(body, num_classes, mode)


def finetune_loop(items, model_cfg: ModelConfig, cfg: FinetuneConfig, num_classes: int,
                  pretrained=None, out_dir=None, steps: int | None = None) -> FinetuneResult:
    """Fine-tune on labelled ``items``; ``pretrained`` as for :func:`build_seld_model`.

    The three regimes: frozen random body (``pretrained=None, freeze_body``),
    frozen pre-trained body, and unfrozen pre-trained body.
    """
    model = build_seld_model(model_cfg, num_classes, cfg.mode, pretrained, cfg.seed)
    examples = training_examples(items, cfg.mode)
    if not examples:
        raise DataError("no training windows")
    body_params = body_parameters(model)
    for p in model.body.parameters():
        p.requires_grad_(False)
    if not cfg.freeze_body:
        for p in body_params:
            p.requires_grad_(True)
    groups = [
        {"params": list(model.sed_head.parameters()), "base_lr": cfg.sed_lr},
        {"params": list(model.doa_head.parameters()), "base_lr": cfg.doa_lr},
    ]
    if not cfg.freeze_body:
        groups.append({"params": body_params, "base_lr": cfg.body_lr})
    optimizer = build_optimizer(groups, cfg)
    steps = cfg.total_updates if steps is None else steps
    result = FinetuneResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "finetune_log.csv", "w", newline="")
        writer = csv.DictWriter(log_file, LOG_FIELDS)
        writer.writeheader()
    T = None
    step = 0
    try:
        for step in range(steps):
            model.train()
            if cfg.freeze_body:
                model.body.eval()
            for g in optimizer.param_groups:
                g["lr"] = tri_stage_lr(step, cfg.total_updates, g["base_lr"], cfg.stage_fractions, cfg.final_lr_scale)
            rng = np.random.default_rng([cfg.seed, step])
            picks = rng.choice(len(examples), size=cfg.batch_size, replace=len(examples) < cfg.batch_size)
            batch = collate([examples[i] for i in picks], num_classes, cfg, rng)
            stripes = None
            if cfg.spec_augment:
                if T is None:
                    with torch.no_grad():
                        T = model.body.encode(batch["x"][:1]).shape[1]
                stripes = [sample_stripes(T, model_cfg.conv_channels, cfg, rng) for _ in picks]
            optimizer.zero_grad(set_to_none=True)
            sed_logits, doa = model(batch["x"], stripes)
            terms = seld_loss(sed_logits, doa, batch["sed"], batch["doa"], batch["mask"],
                              batch["valid"] if cfg.mode == "framepred" else None, cfg.w_sed, cfg.w_doa)
            for name, value in terms.items():
                if not torch.isfinite(value):
                    raise NumericalError(f"non-finite {name} loss at step {step}", term=name)
            terms["total"].backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_([p for g in groups for p in g["params"]], cfg.clip_norm)
            optimizer.step()
            row = {
                "step": step,
                "lr_body": 0.0 if cfg.freeze_body else optimizer.param_groups[2]["lr"],
                "lr_heads": optimizer.param_groups[0]["lr"],
                "L_total": float(terms["total"].detach()), "L_sed": float(terms["sed"].detach()),
                "L_doa": float(terms["doa"].detach()),
            }
            result.log.append(row)
            if writer is not None and step % cfg.log_every == 0:
                writer.writerow(row)
    except KeyboardInterrupt:
        if out_dir is not None:
            save_finetuned(out_dir / f"finetune_{step:06d}", model, model_cfg, cfg, step)
        raise
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_finetuned(out_dir / "finetune_final", model, model_cfg, cfg, steps)
    return result


def save_finetuned(path, model: SeldModel, model_cfg, cfg, step):
    meta = checkpoint_meta("finetune", step, model_cfg, num_classes=model.num_classes, mode=model.mode,
                           finetune_config=asdict(cfg))
    return save_checkpoint(path, state_tensors(model), meta)


def load_finetuned(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "finetune":
        raise ConfigError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'finetune'")
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    model = SeldModel(W2vSeld(model_cfg), meta["num_classes"], meta["mode"])
    load_state(model, tensors)
    model.eval()
    threshold = meta.get("finetune_config", {}).get("sed_threshold", 0.5)
    return model, threshold


# -- inference ---------------------------------------------------------------


def postprocess(sed_probs, doa, threshold=0.5, num_frames=None):
    """Fold 20 ms frame predictions into 100 ms records.

    A class is active in a segment when its mean probability over the five
    frames exceeds ``threshold``. Its DOA is the mean of the vectors of the
    individually active frames, normalised. Returns ``(annotation, flags)``
    where flags lists ``(segment, class)`` pairs that fell back to (1, 0, 0).
    """
    sed_probs = np.asarray(sed_probs, dtype=np.float64)
    doa = np.asarray(doa, dtype=np.float64)
    T, N = sed_probs.shape
    vec = doa.reshape(T, 3, N).transpose(0, 2, 1)  # [T, N, 3]
    n_seg = math.ceil(T / 5)
    records, flags = [], []
    for s in range(n_seg):
        rows = slice(5 * s, min(5 * s + 5, T))
        p = sed_probs[rows]
        for c in np.flatnonzero(p.mean(axis=0) > threshold):
            frame_active = p[:, c] > threshold
            v = vec[rows, c][frame_active]
            mean = v.mean(axis=0) if len(v) else np.zeros(3)
            norm = np.linalg.norm(mean)
            if norm == 0:
                mean = vec[rows, c][frame_active][-1] if len(v) else vec[rows, c][-1]
                norm = np.linalg.norm(mean)
            if norm == 0:
                mean, norm = np.array([1.0, 0.0, 0.0]), 1.0
                flags.append((s, int(c)))
            records.append((s, int(c), mean / norm))
    return SeldAnnotation(records, N, num_frames if num_frames is not None else n_seg), flags


@torch.no_grad()
def predict_clip(model: SeldModel, clip, threshold=0.5) -> SeldAnnotation:
    """100 ms predictions for a whole clip."""
    model.eval()
    clip = prepare_clip(clip)
    N = model.num_classes
    num_frames = math.ceil(clip.num_samples / LABEL_HOP_SAMPLES)
    if model.mode == "segpred":
        windows = window_iter(clip, "segpred")
        x = torch.from_numpy(np.stack([extract_window(clip, w) for w in windows]).astype(np.float32))
        sed_logits, doa = model(x)
        probs = torch.sigmoid(sed_logits).numpy()
        doa = doa.numpy()
        # each window is one segment: replicate so postprocess sees five equal frames
        probs = np.repeat(probs, 5, axis=0)
        doa = np.repeat(doa, 5, axis=0)
        ann, _ = postprocess(probs, doa, threshold, num_frames)
        return ann
    hop = SEGMENTS_PER_FRAMEPRED_WINDOW * LABEL_HOP_SAMPLES
    rows = SEGMENTS_PER_FRAMEPRED_WINDOW * 5
    probs, doas = [], []
    windows = window_iter(clip, "framepred", hop_samples=hop)
    for i, w in enumerate(windows):
        x = torch.from_numpy(extract_window(clip, w).astype(np.float32))[None]
        sed_logits, doa = model(x)
        keep = rows if i < len(windows) - 1 else sed_logits.shape[1]
        probs.append(torch.sigmoid(sed_logits[0, :keep]).numpy())
        doas.append(doa[0, :keep].numpy())
    probs = np.concatenate(probs)[:5 * num_frames]
    doas = np.concatenate(doas)[:5 * num_frames]
    ann, _ = postprocess(probs, doas, threshold, num_frames)
    return SeldAnnotation(ann.records, N, num_frames)


def evaluate(model: SeldModel, items, threshold=0.5, location_aware=False) -> MetricsReport:
    """Metrics over labelled items, counts summed across clips."""
    pairs = []
    for item in items:
        clip, ann = (item.clip, item.annotation) if hasattr(item, "clip") else item
        pairs.append((ann, predict_clip(model, clip, threshold)))
    return evaluate_pairs(pairs, location_aware=location_aware)
