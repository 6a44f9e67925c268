import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import w2vseld.pretrain as pt
from w2vseld.ambisonics import random_scene_spec, synthesize_scene
from w2vseld.errors import ConfigError, NumericalError
from w2vseld.model import ModelConfig
from w2vseld.pretrain import (PretrainConfig, contrastive_loss, diversity_loss, info_nce, load_pretrained,
                              lr_schedule, masked_prediction_accuracy, pretrain_loop, sample_distractor_indices)


def test_orthogonal_distractors_closed_form():
    D = 101
    eye = torch.eye(D, dtype=torch.float64)
    loss = info_nce(eye[:1], eye[:1], eye[1:].unsqueeze(0), 0.1)
    # logits are 1/0.1 for the positive and 0 for each of the 100 distractors
    assert float(loss) == pytest.approx(math.log1p(100 * math.exp(-10)), abs=1e-9)
    assert float(loss) == pytest.approx(4.53e-3, abs=1e-5)


def test_orthogonal_distractors_through_sampling():
    # every masked frame carries its own basis vector, so any draw of other frames is orthogonal
    T = 120
    q = torch.eye(T, dtype=torch.float64).unsqueeze(0)
    mask = torch.ones(1, T, dtype=torch.bool)
    loss = contrastive_loss(q, q, mask, 100, 0.1, generator=3)
    assert float(loss) == pytest.approx(math.log1p(100 * math.exp(-10)), abs=1e-9)


def test_duplicate_distractor_gives_ln2():
    v = torch.tensor([[0.3, -1.2, 0.5]], dtype=torch.float64)
    assert float(info_nce(v, v, v.unsqueeze(1), 0.1)) == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("K", [1, 10, 100])
def test_equal_similarities_give_ln_k_plus_1(K):
    q = torch.ones(2, 30, 8, dtype=torch.float64)
    c = torch.randn(2, 30, 8, dtype=torch.float64)
    mask = torch.zeros(2, 30, dtype=torch.bool)
    mask[:, 5:20] = True
    assert float(contrastive_loss(c, q, mask, K, 0.1, generator=0)) == pytest.approx(math.log(K + 1), abs=1e-12)


def test_contrastive_loss_rotation_invariant():
    g = torch.Generator().manual_seed(0)
    c = torch.randn(2, 40, 16, dtype=torch.float64, generator=g)
    q = torch.randn(2, 40, 16, dtype=torch.float64, generator=g)
    mask = torch.rand(2, 40, generator=g) < 0.5
    R, _ = torch.linalg.qr(torch.randn(16, 16, dtype=torch.float64, generator=g))
    a = contrastive_loss(c, q, mask, 10, 0.1, generator=5)
    b = contrastive_loss(c @ R, q @ R, mask, 10, 0.1, generator=5)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_zero_vectors_are_guarded():
    c = torch.zeros(1, 20, 4)
    mask = torch.ones(1, 20, dtype=torch.bool)
    assert torch.isfinite(contrastive_loss(c, c, mask, 5, 0.1, generator=0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), K=st.integers(1, 20), p=st.floats(0.05, 1.0))
def test_distractors_never_self(seed, K, p):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(3, 25, generator=g) < p
    if mask.sum() == 0:
        return
    rows, cols, dist = sample_distractor_indices(mask, K, g)
    assert dist.shape == (len(cols), K)
    assert not (dist == cols.unsqueeze(1)).any()
    multi = mask.sum(1)[rows] > 1
    assert mask[rows[multi].unsqueeze(1), dist[multi]].all()


def test_diversity_loss_examples():
    V = 16
    uniform = torch.full((5, 2, V), 1 / V, dtype=torch.float64)
    one_hot = torch.zeros(5, 2, V, dtype=torch.float64)
    one_hot[..., 3] = 1
    assert float(diversity_loss(uniform)) == pytest.approx(0.0, abs=1e-12)
    assert float(diversity_loss(one_hot)) == (V - 1) / V
    mixed = torch.zeros(1, 2, 4, dtype=torch.float64)
    mixed[0, 0] = 0.25
    mixed[0, 1, 0] = 1
    assert float(diversity_loss(mixed)) == pytest.approx(0.375, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), V=st.integers(2, 40))
def test_diversity_loss_bounds(seed, V):
    p = torch.rand(7, 2, V, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    p = p / p.sum(-1, keepdim=True)
    value = float(diversity_loss(p))
    assert -1e-12 <= value <= (V - 1) / V + 1e-12


def test_lr_schedule_points():
    cfg = PretrainConfig()
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(16000, cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(32000, cfg) == 5e-4
    assert lr_schedule(216000, cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(400000, cfg) == 0.0


def test_config_validation():
    with pytest.raises(ConfigError) as err:
        PretrainConfig(num_distractors=0, logit_temperature=0, alpha=-1)
    assert len(err.value.problems) == 3


# -- training loop -----------------------------------------------------------


def _clips(n, seconds=4.0, seed=0):
    rng = np.random.default_rng(seed)
    return [synthesize_scene(random_scene_spec(rng, 4, seconds), seed=seed * 1000 + i)[0] for i in range(n)]


def _short_cfg(**kw):
    return PretrainConfig.toy(warmup_updates=5, total_updates=20, batch_samples=128000, **kw)


def test_loop_is_deterministic_and_decomposes(tmp_path):
    clips = _clips(3)
    a = pretrain_loop(clips, ModelConfig.toy(), _short_cfg(), out_dir=tmp_path / "a", steps=8)
    b = pretrain_loop(clips, ModelConfig.toy(), _short_cfg(), out_dir=tmp_path / "b", steps=8)
    assert (tmp_path / "a/pretrain_log.csv").read_bytes() == (tmp_path / "b/pretrain_log.csv").read_bytes()
    for row in a.log:
        assert abs(row["L_total"] - (row["L_m"] + 0.1 * row["L_d"])) < 1e-6
    with open(tmp_path / "a/pretrain_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(pt.LOG_FIELDS) and len(rows) == 8
    assert [p.name for p in a.checkpoints] == ["pretrain_000008.json"]
    body = load_pretrained(a.checkpoints[0], ModelConfig.toy())
    for (k, x), y in zip(body.state_dict().items(), a.model.state_dict().values()):
        assert torch.equal(x, y), k
    assert b.log == a.log


def test_load_pretrained_config_mismatch(tmp_path):
    res = pretrain_loop(_clips(1), ModelConfig.toy(), _short_cfg(), out_dir=tmp_path, steps=1)
    with pytest.raises(ConfigError) as err:
        load_pretrained(res.checkpoints[0], ModelConfig.toy(num_layers=3, codebook_size=8))
    assert len(err.value.problems) == 2


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    real = pt.pretrain_terms
    calls = {"n": 0}

    def flaky(model, batch, cfg, hard=True):
        calls["n"] += 1
        terms = real(model, batch, cfg, hard)
        if calls["n"] == 4:
            terms["diversity"] = terms["diversity"] * float("nan")
        return terms

    monkeypatch.setattr(pt, "pretrain_terms", flaky)
    with pytest.raises(NumericalError) as err:
        pretrain_loop(_clips(1), ModelConfig.toy(), _short_cfg(checkpoint_every=2), out_dir=tmp_path, steps=10)
    assert err.value.term == "diversity"
    assert sorted(p.name for p in tmp_path.glob("pretrain_*.json")) == ["pretrain_000002.json"]


def test_interrupt_checkpoints(tmp_path, monkeypatch):
    real = pt.make_batch

    def interrupt(windows, step, *a):
        if step == 2:
            raise KeyboardInterrupt
        return real(windows, step, *a)

    monkeypatch.setattr(pt, "make_batch", interrupt)
    with pytest.raises(KeyboardInterrupt):
        pretrain_loop(_clips(1), ModelConfig.toy(), _short_cfg(), out_dir=tmp_path, steps=10)
    assert (tmp_path / "pretrain_000002.json").exists()


@pytest.mark.slow
def test_pretraining_learns():
    clips = _clips(16)
    cfg = PretrainConfig.toy(total_updates=300, warmup_updates=30)
    res = pretrain_loop(clips, ModelConfig.toy(), cfg, steps=300)
    first = np.mean([r["L_m"] for r in res.log[:20]])
    last = np.mean([r["L_m"] for r in res.log[-20:]])
    assert last < first
    acc = masked_prediction_accuracy(res.model, _clips(4, seed=1), ModelConfig.toy(), cfg)
    assert acc > 1 / (cfg.num_distractors + 1)
