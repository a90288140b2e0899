"""Acceptance criteria 1-9 at their stated tolerances.

Each test records one pass/fail line (printed in the terminal summary) and
then asserts. Training-based criteria run reduced desk-scale configurations;
the exact settings live next to each test.
"""
import copy
import random
import shutil
import time
import warnings

import numpy as np
import pytest
import torch
from sklearn.linear_model import LogisticRegression

from cidacap import cida, losses, metrics
from cidacap.backbone import BackboneConfig, FeatureExtractor, encode_images
from cidacap.captioner import (CaptionerConfig, CaptionTrainConfig, MeshedCaptioner, beam_search, build_vocab,
                               fit_captioner, generate, greedy_decode)
from cidacap.metrics import EvalPair
from cidacap.pipeline import ExperimentConfig, run_eval, run_experiment, run_stage1, run_stage2
from cidacap.pipeline import runner
from cidacap.smoothing import SIGMA_FLOOR, CBS1d, SigmaSchedule
from cidacap.synthdata import DEFAULT_TARGET_SHIFT, SOURCE, TEST, TRAIN, SceneSpec, apply_domain_shift, build_splits
from conftest import record, write_tiny_ini
from test_losses import analytic, central_diff, rel_error, unit_rows
from test_metrics import random_pairs
import oracles

SEEDS = range(5)
SMALL_STAGES = ((16, 1), (32, 1), (64, 1))


def small_extractor(k, size=64):
    return FeatureExtractor(BackboneConfig(stages=SMALL_STAGES, input_size=size, proj_dim=64, num_classes=k))


# ------------------------------------------------------------------ 1

def test_criterion_1_metric_oracles():
    t = time.time()
    worst = 0.0
    for cand, refs in random_pairs(1001, 120):
        p = EvalPair(cand, refs)
        for n in range(1, 5):
            worst = max(worst, abs(metrics.bleu(p, n) - oracles.bleu_oracle(cand, refs, n)))
        worst = max(worst, abs(metrics.rouge_l(p) - oracles.rouge_l_oracle(cand, refs)))
        worst = max(worst, abs(metrics.meteor_lite(p) - oracles.meteor_oracle(cand, refs)))
    for seed in range(100):
        pairs = random_pairs(2000 + seed, random.Random(seed).randint(2, 6))
        _, mean = metrics.cider([EvalPair(c, r) for c, r in pairs])
        worst = max(worst, abs(mean - oracles.cider_oracle(pairs)[1]))
    rng = np.random.default_rng(7)
    for _ in range(120):
        K, n = int(rng.integers(2, 6)), int(rng.integers(3, 40))
        logits = rng.normal(size=(n, K)) * rng.uniform(0.5, 6)
        P = np.exp(logits - logits.max(1, keepdims=True))
        P /= P.sum(1, keepdims=True)
        y = rng.integers(0, K, size=n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            worst = max(worst, abs(metrics.tace(P, y) - oracles.tace_oracle(P, y)))
        worst = max(worst, abs(metrics.ece(P, y) - oracles.ece_oracle(P, y)),
                    abs(metrics.sce(P, y) - oracles.sce_oracle(P, y)),
                    abs(metrics.brier(P, y) - oracles.brier_oracle(P, y)))

    caps = [["grasper", "is", "cutting", "fat", str(i)] for i in range(4)]
    same = [EvalPair(c, [c]) for c in caps]
    y = np.array([0, 2, 1, 2])
    onehot = np.eye(3)[y]
    maxima = (all(abs(metrics.bleu(p, n) - 1) < 1e-12 for p in same for n in range(1, 5))
              and all(abs(metrics.rouge_l(p) - 1) < 1e-12 for p in same)
              and abs(metrics.cider(same)[1] - 10) < 1e-9
              and all(fn(onehot, y) == 0 for fn in (metrics.ece, metrics.sce, metrics.tace, metrics.brier)))
    elapsed = time.time() - t
    ok = worst <= 1e-9 and maxima and elapsed < 60
    record(1, ok, f"max |delta| {worst:.2e} over >=100 instances per metric, maxima {maxima}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_criterion_2_gradients():
    t = time.time()
    g = torch.Generator().manual_seed(2024)
    errs = {"supcon": [], "ce_with_ls": [], "logit_distill": [], "feature_distill": []}
    for _ in range(20):
        Z = unit_rows(g, 6, 4)
        y = torch.randint(0, 2, (6,), generator=g)
        errs["supcon"].append(rel_error(*(f(lambda x: losses.supcon_loss(x, y, 0.07, validate=False), Z)
                                          for f in (analytic, central_diff))))
        logits = torch.randn(4, 5, generator=g, dtype=torch.float64) * 2
        t_ = torch.randint(0, 5, (4,), generator=g)
        errs["ce_with_ls"].append(rel_error(*(f(lambda x: losses.ce_with_ls(x, t_, 0.1), logits)
                                              for f in (analytic, central_diff))))
        s = torch.randn(3, 6, generator=g, dtype=torch.float64)
        tl = torch.randn(3, 6, generator=g, dtype=torch.float64)
        errs["logit_distill"].append(rel_error(*(f(lambda x: losses.logit_distill_loss(x, tl, 3.0), s)
                                                 for f in (analytic, central_diff))))
        s1, s2, t1, t2 = (unit_rows(g, 4, 3) for _ in range(4))
        fn = lambda x: losses.feature_distill_loss(x, s2, t1, t2, 0.07, validate=False)
        errs["feature_distill"].append(rel_error(analytic(fn, s1), central_diff(fn, s1)))
    elapsed = time.time() - t
    worst = {k: max(v) for k, v in errs.items()}
    ok = all(v < 1e-4 for v in worst.values()) and all(len(v) >= 20 for v in errs.values()) and elapsed < 60
    record(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_3_curriculum():
    sched = SigmaSchedule()
    trace = sched.trace(50)
    expected = [1.0 * 0.9 ** (e // 2) for e in range(50)]
    trace_ok = all(abs(a - b) < 1e-12 for a, b in zip(trace, expected)) and len(trace) == 50
    torch.manual_seed(0)
    cfg = dict(stages=((8, 1), (16, 1)), input_size=32, proj_dim=8, num_classes=3)
    plain = FeatureExtractor(BackboneConfig(**cfg)).eval()
    cbs = FeatureExtractor(BackboneConfig(**cfg, cbs_enabled=True)).eval()
    cbs.load_state_dict(plain.state_dict())
    x = torch.rand(4, 3, 32, 32)
    on, off = CBS1d(6, 8, cbs=True), CBS1d(6, 8, cbs=False)
    off.load_state_dict(on.state_dict())
    on.set_sigma(SIGMA_FLOOR)
    R = torch.randn(2, 5, 6)
    with torch.no_grad():
        gap2d = float((cbs(x, sigma=SIGMA_FLOOR) - plain(x)).abs().max())
        gap1d = float((on(R) - off(R)).abs().max())
    ok = trace_ok and gap2d <= 1e-4 and gap1d <= 1e-4
    record(3, ok, f"50-epoch trace exact {trace_ok}, floor gap 2D {gap2d:.1e} 1D {gap1d:.1e}")
    assert ok


# ------------------------------------------------------------------ 4
# 64px, small backbone, 8 epochs at lr 0.05 per increment, 3 fine-tune epochs

def _forgetting_run(seed):
    spec = SceneSpec(seed=seed)
    m = build_splits(spec, counts={"train": 200, "val": 1, "test": 50, "target_pool": 2, "target_test": 1},
                     k_shot=1)
    train, test = m.select(SOURCE, TRAIN), m.select(SOURCE, TEST)
    base, novel = (0, 1, 2, 3), (4, 5)
    cfg = cida.CIDAConfig(lr=0.05, lr_finetune=0.005, seed=seed, memory_budget=20)
    torch.manual_seed(seed)
    model = small_extractor(4)
    d0 = [s for s in train if s.label in base]
    d1 = [s for s in train if s.label in novel]
    cida.train_increment(model, None, d0, cida.IncrementPlan(0, base, epochs_train=8, epochs_finetune=3),
                         None, cfg)
    control = copy.deepcopy(model)
    memory = cida.update_memory(cida.ExemplarMemory(budget=20), d0, model, 20)
    teacher = cida.snapshot_teacher(model)
    plan = cida.IncrementPlan(1, novel, epochs_train=8, epochs_finetune=3, old_classes=base)
    cida.train_increment(model, teacher, cida.build_increment_trainset(memory, d1), plan, None, cfg)
    cida.balanced_finetune(model, memory, d1, plan, cfg, teacher)
    bare = cida.CIDAConfig(lr=0.05, seed=seed, memory_budget=0, use_distillation=False)
    cida.train_increment(control, cida.snapshot_teacher(control), d1, plan, None, bare)
    tests = {c: [s for s in test if s.label == c] for c in range(6)}
    ci = cida.evaluate_increment(model, tests, plan.seen_classes, base).old_class_accuracy
    ctrl = cida.evaluate_increment(control, tests, plan.seen_classes, base).old_class_accuracy
    return ci, ctrl


def test_criterion_4_forgetting():
    t = time.time()
    rows = [_forgetting_run(s) for s in SEEDS]
    elapsed = time.time() - t
    wins = sum(ci - ctrl >= 0.20 for ci, ctrl in rows)
    ok = wins >= 4 and elapsed < 15 * 60
    detail = " ".join(f"{ci:.3f}/{ctrl:.3f}" for ci, ctrl in rows)
    record(4, ok, f"old-class acc CI/control per seed {detail}; {wins}/5 seeds >= +20 pts, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 5
# 100 images/class, 15 epochs, probe fit on clean source-train features

def _probe_run(seed):
    spec = SceneSpec(seed=seed)
    m = build_splits(spec, counts={"train": 100, "val": 1, "test": 40, "target_pool": 2, "target_test": 1},
                     k_shot=1)
    train, test = m.select(SOURCE, TRAIN), m.select(SOURCE, TEST)
    shifted = [apply_domain_shift(s, DEFAULT_TARGET_SHIFT) for s in test]
    classes = tuple(spec.source_classes)
    out = {}
    for mode in (cida.Mode.CE_DISTILL, cida.Mode.SUPCON_CIDA):
        torch.manual_seed(seed)
        model = small_extractor(len(classes))
        plan = cida.IncrementPlan(0, classes, mode=mode, epochs_train=15, epochs_finetune=1)
        cida.train_increment(model, None, train, plan, None, cida.CIDAConfig(lr=0.05, seed=seed, temperature=0.1))
        feats = lambda ss: encode_images(model, [s.image for s in ss])[0].numpy()
        probe = LogisticRegression(max_iter=2000).fit(feats(train), [s.label for s in train])
        out[mode] = probe.score(feats(shifted), [s.label for s in shifted])
    return out[cida.Mode.SUPCON_CIDA], out[cida.Mode.CE_DISTILL]


def test_criterion_5_shift_probe():
    t = time.time()
    rows = [_probe_run(s) for s in SEEDS]
    elapsed = time.time() - t
    wins = sum(sc > ce for sc, ce in rows)
    ok = wins >= 4 and elapsed < 15 * 60
    detail = " ".join(f"{sc:.3f}/{ce:.3f}" for sc, ce in rows)
    record(5, ok, f"shifted probe acc SupCon/CE per seed {detail}; {wins}/5 seeds, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 6
# pipeline stage 1 in CE mode, label smoothing toggled, ECE over the stage-1 test split

def _calibration_run(root, seed):
    base = ExperimentConfig().with_overrides({
        "data.root": str(root / "data"), "data.seed": seed, "run.seed": seed,
        "data.train_per_class": 60, "data.test_per_class": 30, "backbone.stages": "16x1,32x1,64x1",
        "backbone.proj_dim": 64, "stage1.mode": "ce", "stage1.epochs_train": 8, "stage1.epochs_finetune": 3,
        "stage1.lr": 0.05, "stage1.lr_finetune": 0.005})
    runner.generate_data(base)
    out = {}
    for ls in (False, True):
        cfg = base.with_overrides({"stage1.ls": ls, "run.out_dir": str(root / f"ls{int(ls)}")})
        run_stage1(cfg)
        with np.load(runner.RunPaths(cfg.run.out_dir).stage1_probs) as z:
            out[ls] = metrics.ece(z["probs"], z["labels"])
    return out[True], out[False]


def test_criterion_6_label_smoothing_calibration(tmp_path):
    rows = [_calibration_run(tmp_path / f"s{s}", s) for s in SEEDS]
    wins = sum(with_ls < without for with_ls, without in rows)
    ok = wins >= 4
    detail = " ".join(f"{a:.4f}/{b:.4f}" for a, b in rows)
    record(6, ok, f"ECE eps=0.1/eps=0 per seed {detail}; {wins}/5 seeds lower with smoothing")
    assert ok


# ------------------------------------------------------------------ 7

def _toy_six_token_model(seed):
    # two words plus the four reserved ids; caption chosen by the sign of one feature
    torch.manual_seed(seed)
    model = MeshedCaptioner(CaptionerConfig(vocab_size=6, d_in=4, d_model=16, n_heads=2, d_ff=32, n_layers=2,
                                            memory_slots=2, dropout=0.0, max_len=3))
    g = torch.Generator().manual_seed(seed)
    R = torch.randn(16, 3, 4, generator=g)
    caps = [[1, 4 if float(r[0, 0]) > 0 else 5, 2] for r in R]
    fit_captioner(model, R, caps, CaptionTrainConfig(epochs=5, batch_size=8, lr=1e-2, seed=seed), None)
    return model.eval(), torch.randn(10, 3, 4, generator=g)


def test_criterion_7_captioner(tmp_path):
    t = time.time()
    seed = 0
    spec = SceneSpec(seed=seed)
    m = build_splits(spec, counts={"train": 200, "val": 1, "test": 20, "target_pool": 2, "target_test": 1},
                     k_shot=1)
    train, test = m.select(SOURCE, TRAIN), m.select(SOURCE, TEST)
    classes = tuple(spec.source_classes)
    torch.manual_seed(seed)
    backbone = small_extractor(len(classes))
    cida.train_increment(backbone, None, train, cida.IncrementPlan(0, classes, epochs_train=6, epochs_finetune=1),
                         None, cida.CIDAConfig(lr=0.05, seed=seed))
    R_train = torch.as_tensor(encode_images(backbone, [s.image for s in train])[1])
    R_test = torch.as_tensor(encode_images(backbone, [s.image for s in test])[1])
    vocab = build_vocab([s.caption for s in train])
    torch.manual_seed(seed)
    model = MeshedCaptioner(CaptionerConfig(vocab_size=len(vocab), d_in=R_train.shape[-1], d_model=64, d_ff=128,
                                            max_len=8, memory_slots=4, cbs=True))
    fit_captioner(model, R_train, [vocab.encode(s.caption) for s in train],
                  CaptionTrainConfig(epochs=50, batch_size=50, lr=5e-4, seed=seed), SigmaSchedule())
    gen = generate(model, R_test, vocab, beam=5)
    bleu4 = metrics.corpus_bleu([EvalPair(g, [s.caption]) for g, s in zip(gen, test)], 4)
    greedy_same = np.mean([beam_search(model, r, beam=1).tokens == greedy_decode(model, r) for r in R_test])
    exhaustive_same = []
    for s in range(3):
        toy, inputs = _toy_six_token_model(s)
        for r in inputs:
            exhaustive_same.append(beam_search(toy, r, beam=5, max_len=3).tokens == oracles.exhaustive_best(toy, r, 3)[0])
    elapsed = time.time() - t
    ok = bleu4 >= 0.90 and greedy_same == 1.0 and all(exhaustive_same) and elapsed < 30 * 60
    record(7, ok, f"BLEU-4 {bleu4:.4f} after 50 epochs on {len(test)} held-out images, beam1==greedy "
                  f"{greedy_same:.0%}, beam5==exhaustive {np.mean(exhaustive_same):.0%} of "
                  f"{len(exhaustive_same)}, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 8
# one shared stage-1 run per seed; stage 2 trained twice with 1D CBS on and off

def _cbs_run(root, seed):
    base = ExperimentConfig().with_overrides({
        "data.root": str(root / "data"), "data.seed": seed, "run.seed": seed, "data.image_size": 32,
        "data.train_per_class": 40, "data.val_per_class": 2, "data.test_per_class": 5, "data.target_pool": 10,
        "data.target_test": 20, "backbone.stages": "16x1,32x1", "backbone.proj_dim": 32,
        "stage1.epochs_train": 6, "stage1.epochs_finetune": 2, "stage1.lr": 0.05, "stage1.lr_finetune": 0.005,
        "stage1.classifier_epochs": 5, "stage2.epochs": 50, "stage2.d_model": 32, "stage2.d_ff": 64,
        "stage2.n_heads": 2, "stage2.memory_slots": 4, "stage2.max_len": 8, "stage2.lr": 2e-3,
        "stage2.finetune_epochs": 10, "stage2.finetune_lr": 1e-3, "run.out_dir": str(root / "cbs")})
    runner.generate_data(base)
    run_stage1(base)
    shutil.copytree(root / "cbs", root / "plain")
    out = {}
    for cbs in (True, False):
        cfg = base.with_overrides({"stage2.cbs1d": cbs, "run.out_dir": str(root / ("cbs" if cbs else "plain"))})
        run_stage2(cfg)
        out[cbs] = run_eval(cfg, domains=("TD_few_shot",))["TD_few_shot"]["bleu1"]
    return out[True], out[False]


def test_criterion_8_cbs1d_direction(tmp_path):
    rows = [_cbs_run(tmp_path / f"s{s}", s) for s in SEEDS]
    wins = sum(a >= b for a, b in rows)
    ok = wins >= 3
    detail = " ".join(f"{a:.4f}/{b:.4f}" for a, b in rows)
    record(8, ok, f"TD few-shot BLEU-1 CBS/no-CBS per seed {detail}; {wins}/5 seeds CBS >=")
    assert ok


# ------------------------------------------------------------------ 9

def _final_arrays(out_dir, name):
    with np.load(f"{out_dir}/checkpoints/{name}.npz") as z:
        return {k: z[k] for k in z.files}


def test_criterion_9_determinism_and_resume(tmp_path):
    for d in "abc":
        (tmp_path / d).mkdir()
    a = ExperimentConfig.load(write_tiny_ini(tmp_path / "a"))
    b = ExperimentConfig.load(write_tiny_ini(tmp_path / "b"))
    identical = run_experiment(a) == run_experiment(b)
    texts = all((tmp_path / "a/out/reports" / f).read_text() == (tmp_path / "b/out/reports" / f).read_text()
                for f in ("report_SD.txt", "report_TD_one_shot.txt", "report_TD_few_shot.txt"))

    c = ExperimentConfig.load(write_tiny_ini(tmp_path / "c"))
    shutil.copytree(tmp_path / "a/data", tmp_path / "c/data")
    run_stage1(c, stop_after_epoch=1)
    run_stage1(c, resume=True)
    assert run_stage2(c, stop_after_epoch=1) is None
    run_stage2(c, resume=True)
    exact = True
    for name in ("stage1_final", "stage2_SD", "stage2_TD_one_shot", "stage2_TD_few_shot"):
        x, y = _final_arrays(a.run.out_dir, name), _final_arrays(c.run.out_dir, name)
        exact &= set(x) == set(y) and all(np.array_equal(x[k], y[k]) for k in x)
    ok = identical and texts and exact
    record(9, ok, f"fixed-seed reports identical {identical and texts}, resumed checkpoints bit-exact {exact}")
    assert ok
