"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run alone with ``python3 tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -s``.
Criteria 7 and 8 train models and take minutes; they carry the ``slow`` marker.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import directional_gradient_check, floor_recurrence, gradient_ok
from w2vseld.ambisonics import apply_rotation, encode_direction, random_scene_spec, rotation_table, synthesize_scene
from w2vseld.annotation import SeldAnnotation, sph_to_cart
from w2vseld.finetune import FinetuneConfig, SeldModel, evaluate, finetune_loop, seld_loss
from w2vseld.metrics import evaluate_pairs, seld_score
from w2vseld.model import ModelConfig, W2vSeld, conv_output_length, load_checkpoint, save_checkpoint, span_mask, \
    state_tensors
from w2vseld.pretrain import (PretrainConfig, contrastive_loss, diversity_loss, info_nce, pretrain_loop,
                              pretrain_terms)

N = 4


def _scenes(n, seconds, seed):
    rng = np.random.default_rng(seed)
    return [synthesize_scene(random_scene_spec(rng, N, seconds), seed=seed * 1000 + i) for i in range(n)]


def test_1_metric_oracle(criterion):
    rows = [((0.28, 0.854, 24.6, 0.854), 0.18), ((0.69, 0.413, 23.10, 0.624), 0.45)]
    got = [seld_score(*inputs)[2] for inputs, _ in rows]
    ok = all(abs(g - reported) <= 0.01 for g, (_, reported) in zip(got, rows))
    criterion(1, "metric oracle", ok, f"seld {got[0]:.4f} vs 0.18, {got[1]:.4f} vs 0.45")


def test_2_shape_suite(criterion):
    fixed = [conv_output_length(L) for L in (64000, 47520, 1600)]
    rng = np.random.default_rng(2)
    lengths = rng.integers(400, 80001, size=200)
    random_ok = all(conv_output_length(int(L)) == floor_recurrence(int(L)) for L in lengths)
    torch.manual_seed(0)
    model = SeldModel(W2vSeld(ModelConfig.toy()), N, "framepred").eval()
    with torch.no_grad():
        sed, doa = model(torch.randn(1, 4, 47520))
    ok = fixed == [199, 148, 4] and random_ok and sed.shape == (1, 148, N) and doa.shape == (1, 148, 3 * N)
    criterion(2, "shape suite", ok, f"T={fixed}, framepred {tuple(sed.shape[1:])} {tuple(doa.shape[1:])}, "
              f"200 random lengths {'agree' if random_ok else 'disagree'}")


def test_3_gradient_check(criterion):
    torch.manual_seed(3)
    model = SeldModel(W2vSeld(ModelConfig.toy()), N, "framepred").double().eval()
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 4, 4800, dtype=torch.float64, generator=g)
    T = conv_output_length(4800)
    mask = torch.zeros(2, T, dtype=torch.bool)
    mask[0, 3:9] = True
    mask[1, 5:12] = True
    batch = {"x": x, "mask": mask, "temperature": 1.3, "seed": 11}
    pcfg = PretrainConfig.toy(num_distractors=5)
    sed_t = (torch.rand(2, T, N, generator=g) < 0.4).double()
    doa_t = torch.randn(2, T, 3 * N, dtype=torch.float64, generator=g)
    active = sed_t.repeat(1, 1, 3)

    def loss(m):
        # soft quantizer keeps the objective differentiable everywhere
        pre = pretrain_terms(m.body, batch, pcfg, hard=False)["total"]
        sed, doa = m(x)
        return pre + seld_loss(sed, doa, sed_t, doa_t, active)["total"]

    results = directional_gradient_check(model, loss, step=1e-5, seed=3)
    bad = [name for name, a, b in results if not gradient_ok(a, b)]
    # relative error only means something above the absolute floor
    worst = max((abs(a - b) / max(abs(a), abs(b)) for _, a, b in results if max(abs(a), abs(b)) >= 1e-8),
                default=0.0)
    criterion(3, "gradient check", not bad and len(results) == len(list(model.parameters())),
              f"{len(results)} tensors, worst relative error {worst:.2e}" + (f", failing {bad}" if bad else ""))


def test_4_masking_statistics(criterion):
    frac = float(np.mean([span_mask(199, 0.065, 10, seed=s).mean() for s in range(10000)]))
    criterion(4, "masking statistics", 0.45 <= frac <= 0.53, f"mean masked fraction {frac:.4f}")


def test_5_loss_closed_forms(criterion):
    eye = torch.eye(101, dtype=torch.float64)
    ortho = float(info_nce(eye[:1], eye[:1], eye[1:].unsqueeze(0), 0.1))
    q = torch.eye(120, dtype=torch.float64).unsqueeze(0)
    sampled = float(contrastive_loss(q, q, torch.ones(1, 120, dtype=torch.bool), 100, 0.1, generator=5))
    expected = math.log1p(100 * math.exp(-10))
    V = 16
    uniform = float(diversity_loss(torch.full((3, 2, V), 1 / V, dtype=torch.float64)))
    hot = torch.zeros(3, 2, V, dtype=torch.float64)
    hot[..., 0] = 1
    one_hot = float(diversity_loss(hot))
    clips = [c for c, _ in _scenes(2, 4.0, 5)]
    cfg = PretrainConfig.toy(batch_samples=128000)
    log = pretrain_loop(clips, ModelConfig.toy(), cfg, steps=15).log
    decomposition = max(abs(r["L_total"] - (r["L_m"] + cfg.alpha * r["L_d"])) for r in log)
    ok = (abs(ortho - expected) <= 1e-9 and abs(sampled - expected) <= 1e-9 and abs(uniform) <= 1e-12
          and abs(one_hot - (V - 1) / V) <= 1e-12 and decomposition <= 1e-6)
    criterion(5, "loss closed forms", ok, f"contrastive {ortho:.6e} (closed form {expected:.6e}), diversity "
              f"{uniform:.1e} / {one_hot}, |L_total - (L_m + alpha L_d)| max {decomposition:.1e} over {len(log)} steps")


def test_6_rotation_equivariance(criterion):
    rng = np.random.default_rng(6)
    audio_ok = True
    for t in rotation_table():
        for _ in range(25):
            s = rng.standard_normal(64)
            d = sph_to_cart(rng.uniform(-180, 180), rng.uniform(-90, 90))
            rotated, _ = apply_rotation(encode_direction(s, d), None, t)
            audio_ok &= np.array_equal(rotated.samples, encode_direction(s, t.label_matrix @ d).samples)

    def random_ann():
        recs = [(f, c, sph_to_cart(rng.uniform(-180, 180), rng.uniform(-60, 60)))
                for f in range(20) for c in range(N) if rng.random() < 0.3]
        return SeldAnnotation(recs, N, 20)

    metric_ok = True
    for t in rotation_table():
        for aware in (False, True):
            ref, pred = random_ann(), random_ann()
            a = evaluate_pairs([(ref, pred)], location_aware=aware)
            b = evaluate_pairs([(ref.transformed(t.label_matrix), pred.transformed(t.label_matrix))],
                               location_aware=aware)
            metric_ok &= (a.er, a.f1, a.frame_recall) == (b.er, b.f1, b.frame_recall)
            metric_ok &= abs(a.doa_error_deg - b.doa_error_deg) < 1e-6
    criterion(6, "rotation equivariance", audio_ok and metric_ok,
              f"audio sample-exact: {audio_ok}, metrics invariant: {metric_ok}")


@pytest.mark.slow
def test_7_overfit_sanity(criterion):
    items = _scenes(8, 2.97, 7)
    steps = 1500
    cfg = FinetuneConfig.toy(total_updates=steps, batch_size=4, spec_augment=False, rotate=False,
                             traditional=False)
    start = time.time()
    result = finetune_loop(items, ModelConfig.toy(), cfg, N, steps=steps)
    report = evaluate(result.model, items)
    minutes = (time.time() - start) / 60
    criterion(7, "overfit sanity", report.seld_score < 0.1,
              f"training SELD {report.seld_score:.4f} after {steps} steps ({minutes:.1f} min), "
              f"ER {report.er:.3f} F1 {report.f1:.3f} DOA {report.doa_error_deg:.2f} FR {report.frame_recall:.3f}")


PRETRAIN_STEPS = 1000
FINETUNE_STEPS = 2000


@pytest.mark.slow
def test_8_pretraining_ordering(criterion, tmp_path):
    model_cfg = ModelConfig.toy()
    unlabeled = [c for c, _ in _scenes(32, 4.0, 11)]
    train, held_out = _scenes(16, 2.97, 22), _scenes(8, 2.97, 33)
    start = time.time()
    pcfg = PretrainConfig.toy(total_updates=PRETRAIN_STEPS, warmup_updates=PRETRAIN_STEPS // 10,
                              checkpoint_every=10**9)
    ckpt = pretrain_loop(unlabeled, model_cfg, pcfg, out_dir=tmp_path).checkpoints[-1]
    scores = {}
    for name, pretrained, freeze in [("frozen-random", None, True), ("frozen-pretrained", ckpt, True),
                                     ("unfrozen-pretrained", ckpt, False)]:
        cfg = FinetuneConfig.toy(total_updates=FINETUNE_STEPS, batch_size=4, freeze_body=freeze)
        result = finetune_loop(train, model_cfg, cfg, N, pretrained=pretrained, steps=FINETUNE_STEPS)
        scores[name] = evaluate(result.model, held_out).seld_score
    minutes = (time.time() - start) / 60
    a, b, c = scores["frozen-random"], scores["frozen-pretrained"], scores["unfrozen-pretrained"]
    criterion(8, "pre-training ordering", a >= b >= c,
              f"held-out SELD frozen-random {a:.4f} >= frozen-pretrained {b:.4f} >= unfrozen-pretrained {c:.4f} "
              f"({minutes:.1f} min)")


def test_9_determinism(criterion, tmp_path):
    clips = [c for c, _ in _scenes(2, 4.0, 9)]
    pcfg = PretrainConfig.toy(batch_samples=64000)
    for run in ("a", "b"):
        pretrain_loop(clips, ModelConfig.toy(), pcfg, out_dir=tmp_path / f"pre_{run}", steps=100)
    pre_same = (tmp_path / "pre_a/pretrain_log.csv").read_bytes() == (tmp_path / "pre_b/pretrain_log.csv").read_bytes()
    items = _scenes(2, 2.97, 9)
    fcfg = FinetuneConfig.toy(batch_size=2)
    runs = [finetune_loop(items, ModelConfig.toy(), fcfg, N, out_dir=tmp_path / f"ft_{r}", steps=100)
            for r in ("a", "b")]
    ft_same = (tmp_path / "ft_a/finetune_log.csv").read_bytes() == (tmp_path / "ft_b/finetune_log.csv").read_bytes()
    tensors = state_tensors(runs[0].model)
    path = save_checkpoint(tmp_path / "round", tensors, {"step": 100})
    back, _ = load_checkpoint(path)
    exact = all(back[k].tobytes() == v.numpy().astype("<f4").tobytes() for k, v in tensors.items())
    criterion(9, "determinism", pre_same and ft_same and exact,
              f"pretrain logs identical: {pre_same}, finetune logs identical: {ft_same}, checkpoint bit-exact: {exact}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-v"]))
