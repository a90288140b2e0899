"""Experiment orchestration: data, stage-1 CIDA, feature export, stage-2 captioning, evaluation.

Stage 1 and stage 2 communicate only through files under ``run.out_dir``:
one ``.npy`` region matrix per image plus an index, and the stage-1 test-split
probabilities used for the calibration metrics.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import cida
from ..backbone import FeatureExtractor, encode_images, export_embeddings, write_embeddings
from ..captioner import MeshedCaptioner, Vocab, build_vocab, fit_captioner, generate
from ..metrics import REPORT_KEYS, EvalPair, bleu, calibration_scores, caption_scores, cider, meteor_lite, rouge_l
from ..synthdata import (FEW_SHOT, ONE_SHOT, SOURCE, TARGET, TEST, TRAIN, build_splits, load_dataset,
                         save_dataset)
from .checkpoint import (Checkpoint, CheckpointError, flatten_module, flatten_optimizer, load_checkpoint,
                         restore_rng, rng_arrays, save_checkpoint)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

DOMAINS = ("SD", "TD_one_shot", "TD_few_shot")
_SHOT_SPLIT = {"one_shot": ONE_SHOT, "few_shot": FEW_SHOT}


class RunPaths:
    def __init__(self, out_dir):
        self.root = Path(out_dir)

    checkpoints = property(lambda self: self.root / "checkpoints")
    features = property(lambda self: self.root / "features")
    manifests = property(lambda self: self.root / "increments")
    reports = property(lambda self: self.root / "reports")
    stage1_probs = property(lambda self: self.root / "stage1_test_probs.npz")
    vocab = property(lambda self: self.root / "vocab.txt")

    def ensure(self):
        for d in (self.root, self.checkpoints, self.features, self.manifests, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        return self


# -------------------------------------------------------------------- data

def annotation_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.root) / "annotations.tsv"


def generate_data(cfg: ExperimentConfig) -> Path:
    manifest = build_splits(cfg.scene_spec(), cfg.domain_shift(), cfg.split_counts(), cfg.data.k_shot)
    ann = save_dataset(cfg.data.root, manifest.samples)
    log.info("wrote %d samples to %s", len(manifest.samples), ann)
    return ann


def load_data(cfg: ExperimentConfig) -> list:
    ann = annotation_path(cfg)
    if not ann.exists():
        raise FileNotFoundError(f"dataset manifest {ann} not found; run gen-data first")
    return load_dataset(ann)


def _select(samples, domain=None, split=None, classes=None):
    return [s for s in samples if (domain is None or s.domain == domain) and (split is None or s.split == split)
            and (classes is None or s.label in classes)]


# ------------------------------------------------------------------ stage 1

@dataclass
class IncrementStep:
    classes: tuple[int, ...]
    data: list


def plan_increments(cfg: ExperimentConfig, samples: Sequence) -> list[IncrementStep]:
    """Base source step, optional further source steps, then the target novel-class step."""
    spec = cfg.scene_spec()
    later = [c for step in cfg.source_increments() for c in step]
    base = cfg.base_classes() or tuple(c for c in spec.source_classes if c not in later)
    steps = [IncrementStep(tuple(base), _select(samples, SOURCE, TRAIN, set(base)))]
    for step in cfg.source_increments():
        steps.append(IncrementStep(step, _select(samples, SOURCE, TRAIN, set(step))))
    if cfg.stage1.adapt_target:
        novel = tuple(spec.novel_classes)
        steps.append(IncrementStep(novel, _select(samples, TARGET, _SHOT_SPLIT[cfg.stage1.target_shot], set(novel))))
    seen: set[int] = set()
    for st in steps:
        if not st.data:
            raise ValueError(f"no training samples for increment classes {st.classes}")
        if seen & set(st.classes):
            raise ValueError(f"classes {sorted(seen & set(st.classes))} appear in two increments")
        seen |= set(st.classes)
    return steps


def _model_from_arrays(cfg, ckpt: Checkpoint, prefix: str) -> FeatureExtractor:
    state = ckpt.state_dict(prefix)
    model = FeatureExtractor(cfg.backbone_config(num_classes=int(state["classifier.weight"].shape[0])))
    model.load_state_dict(state)
    model.set_sigma(ckpt.sigma)
    return model


def _stage1_checkpoint(cfg, paths, *, model, teacher, memory, step, phase, epoch, sigma, trace, evals,
                       optimizer=None, scheduler=None, name="stage1_latest"):
    arrays = {**flatten_module("model", model.state_dict()), **rng_arrays()}
    meta = {"step": step, "memory": memory.to_dict(), "trace": trace, "evals": evals}
    if teacher is not None:
        arrays.update(flatten_module("teacher", teacher.state_dict()))
    if optimizer is not None:
        opt_arrays, opt_meta = flatten_optimizer("optimizer", optimizer)
        arrays.update(opt_arrays)
        meta["optimizer.optimizer"] = opt_meta
        meta["scheduler"] = scheduler.state_dict()
    save_checkpoint(paths.checkpoints / name,
                    Checkpoint(arrays, epoch, phase, sigma, cfg.hash(), meta))


def run_stage1(cfg: ExperimentConfig, resume: bool = False, stop_after_epoch: int | None = None):
    """Run every increment, then export region features plus the stage-1 test probabilities.

    ``stop_after_epoch`` ends the run after that many training epochs of the
    current call (for resume tests); the returned model is then partial.
    Returns ``(model, evals)``.
    """
    paths = RunPaths(cfg.run.out_dir).ensure()
    samples = load_data(cfg)
    by_id = {s.id: s for s in samples}
    steps = plan_increments(cfg, samples)
    ccfg = cfg.cida_config()
    schedule = cfg.sigma_schedule() if cfg.stage1.cbs else None

    torch.manual_seed(cfg.run.seed)
    model = FeatureExtractor(cfg.backbone_config(num_classes=len(steps[0].classes)))
    memory = cida.ExemplarMemory(budget=ccfg.memory_budget)
    evals: list[dict] = []
    start_step, resume_train, teacher = 0, None, None
    latest = paths.checkpoints / "stage1_latest"
    if resume and latest.with_suffix(".json").exists():
        ckpt = load_checkpoint(latest, expected_hash=cfg.hash())
        model = _model_from_arrays(cfg, ckpt, "model")
        memory = cida.ExemplarMemory.from_dict(ckpt.meta["memory"], by_id)
        evals = list(ckpt.meta["evals"])
        start_step = int(ckpt.meta["step"])
        restore_rng(ckpt)
        if ckpt.phase == "train":
            resume_train = {"epoch": ckpt.epoch + 1, "optimizer": ckpt.optimizer_state("optimizer"),
                            "scheduler": ckpt.meta["scheduler"], "trace": ckpt.meta["trace"]}
            if ckpt.has("teacher"):
                teacher = cida.snapshot_teacher(_model_from_arrays(cfg, ckpt, "teacher"))
        else:  # the step recorded in the checkpoint is complete
            start_step += 1
    elif resume:
        log.info("no stage-1 checkpoint under %s; starting fresh", paths.checkpoints)

    seen: tuple[int, ...] = tuple(c for st in steps[:start_step] for c in st.classes)
    epochs_done = 0
    for k in range(start_step, len(steps)):
        st = steps[k]
        plan = cida.IncrementPlan(k, st.classes, cfg.stage1_mode, cfg.stage1.epochs_train,
                                  cfg.stage1.epochs_finetune, old_classes=seen)
        if k > 0 and teacher is None:
            teacher = cida.snapshot_teacher(model)
        trainset = cida.build_increment_trainset(memory, st.data)

        def on_epoch_end(info, k=k, plan=plan, teacher=teacher):
            nonlocal epochs_done
            epochs_done += 1
            if (info["epoch"] + 1) % cfg.run.checkpoint_every == 0 or epochs_done == stop_after_epoch:
                _stage1_checkpoint(cfg, paths, model=info["model"], teacher=teacher, memory=memory, step=k,
                                   phase="train", epoch=info["epoch"], sigma=info["trace"][-1]["sigma"],
                                   trace=info["trace"], evals=evals, optimizer=info["optimizer"],
                                   scheduler=info["scheduler"])
            if stop_after_epoch is not None and epochs_done >= stop_after_epoch:
                raise _Interrupted()

        try:
            cida.train_increment(model, teacher, trainset, plan, schedule, ccfg, resume=resume_train,
                                 on_epoch_end=on_epoch_end)
        except _Interrupted:
            return model, evals
        resume_train = None
        if k > 0:
            cida.balanced_finetune(model, memory, st.data, plan, ccfg, teacher, schedule)
        testsets = _class_testsets(samples, plan.seen_classes)
        prev = evals[-1]["mean_accuracy"] if evals else None
        ev = cida.evaluate_increment(model, testsets, plan.seen_classes, plan.old_classes, prev)
        memory = cida.update_memory(memory, st.data, model, ccfg.memory_budget, ccfg.selection, ccfg.seed)
        evals.append({"step": k, **ev.to_dict()})
        cida.write_increment_manifest(paths.manifests / f"increment_{k:02d}.json", plan, memory, ev.to_dict())
        _stage1_checkpoint(cfg, paths, model=model, teacher=None, memory=memory, step=k, phase="step_done",
                           epoch=plan.epochs_train - 1, sigma=None, trace=[], evals=evals)
        seen = plan.seen_classes
        teacher = None

    _stage1_checkpoint(cfg, paths, model=model, teacher=None, memory=memory, step=len(steps) - 1,
                       phase="final", epoch=-1, sigma=model.blurs[0].sigma, trace=[], evals=evals, name="stage1_final")
    export_features(model, samples, paths)
    _write_stage1_probs(model, samples, seen, paths)
    return model, evals


class _Interrupted(Exception):
    pass


def _class_testsets(samples, classes):
    tests = {c: [] for c in classes}
    for s in samples:
        if s.split == TEST and s.label in tests:
            tests[s.label].append(s)
    return tests


def export_features(model: FeatureExtractor, samples: Sequence, paths: RunPaths, batch_size: int = 100) -> Path:
    """One ``N_regions x d`` float32 ``.npy`` per image plus ``index.tsv``."""
    paths.features.mkdir(parents=True, exist_ok=True)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        _, regions, _, _ = encode_images(model, [s.image for s in chunk], batch_size)
        for s, r in zip(chunk, regions):
            np.save(paths.features / f"{s.id}.npy", r.numpy().astype(np.float32))
    index = paths.features / "index.tsv"
    with open(index, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write("\t".join([s.id, s.domain, s.split, " ".join(s.caption),
                                ",".join(map(str, s.object_classes))]) + "\n")
    return index


@dataclass
class FeatureRecord:
    id: str
    domain: str
    split: str
    caption: list[str]
    classes: tuple[int, ...]


def read_feature_index(features_dir) -> list[FeatureRecord]:
    index = Path(features_dir) / "index.tsv"
    if not index.exists():
        raise FileNotFoundError(f"stage-1 features not found at {index}; run train-stage1 first")
    out = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{index} line {lineno}: expected 5 fields")
        out.append(FeatureRecord(parts[0], parts[1], parts[2], parts[3].split(),
                                 tuple(int(x) for x in parts[4].split(",") if x)))
    return out


def load_regions(features_dir, records: Sequence[FeatureRecord]) -> torch.Tensor:
    arrays = []
    for r in records:
        f = Path(features_dir) / f"{r.id}.npy"
        if not f.exists():
            raise FileNotFoundError(f"missing feature file {f}")
        arrays.append(np.load(f))
    return torch.from_numpy(np.stack(arrays))


def _write_stage1_probs(model, samples, seen, paths):
    test = [s for s in samples if s.split == TEST and s.label in seen]
    _, probs = cida.predict_classes(model, test, seen)
    index = {c: i for i, c in enumerate(seen)}
    np.savez(paths.stage1_probs, probs=probs.astype(np.float64),
             labels=np.array([index[s.label] for s in test]), ids=np.array([s.id for s in test]),
             domains=np.array([s.domain for s in test]), classes=np.array(seen))


# ------------------------------------------------------------------ stage 2

def _caption_split(records, domain):
    if domain == "SD":
        return [r for r in records if r.domain == SOURCE and r.split == TRAIN]
    shot = ONE_SHOT if domain == "TD_one_shot" else FEW_SHOT
    return [r for r in records if r.domain == TARGET and r.split == shot]


def _eval_split(records, domain):
    want = SOURCE if domain == "SD" else TARGET
    return [r for r in records if r.domain == want and r.split == TEST]


def _captioner_checkpoint(cfg, paths, name, model, info, phase):
    opt_arrays, opt_meta = flatten_optimizer("optimizer", info["optimizer"])
    arrays = {**flatten_module("model", model.state_dict()), **opt_arrays, **rng_arrays()}
    save_checkpoint(paths.checkpoints / name,
                    Checkpoint(arrays, info["epoch"], phase, info["trace"][-1]["sigma"], cfg.hash(),
                               {"trace": info["trace"], "optimizer.optimizer": opt_meta}))


def _fit_with_checkpoints(cfg, paths, name, model, regions, captions, tcfg, schedule, phase, resume,
                          counter=None):
    latest = paths.checkpoints / name
    resume_state = None
    if resume and latest.with_suffix(".json").exists():
        ckpt = load_checkpoint(latest, expected_hash=cfg.hash())
        model.load_state_dict(ckpt.state_dict("model"))
        model.set_sigma(ckpt.sigma)
        restore_rng(ckpt)
        resume_state = {"epoch": ckpt.epoch + 1, "trace": ckpt.meta["trace"]}
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    if resume_state is not None:
        resume_state["optimizer"] = ckpt.optimizer_state("optimizer")

    def on_epoch_end(info):
        stopping = counter is not None and counter.tick()
        if (info["epoch"] + 1) % cfg.run.checkpoint_every == 0 or info["epoch"] + 1 == tcfg.epochs or stopping:
            _captioner_checkpoint(cfg, paths, name, model, info, "train")
        if stopping:
            raise _Interrupted()

    return fit_captioner(model, regions, captions, tcfg, schedule, optimizer=opt, resume=resume_state,
                         on_epoch_end=on_epoch_end, phase=phase)


class _EpochCounter:
    def __init__(self, limit):
        self.limit, self.done = limit, 0

    def tick(self) -> bool:
        self.done += 1
        return self.limit is not None and self.done >= self.limit


def run_stage2(cfg: ExperimentConfig, resume: bool = False,
               stop_after_epoch: int | None = None) -> dict[str, MeshedCaptioner] | None:
    """Train the source-domain captioner, then one fine-tuned copy per target shot setting.

    A resumed run skips phases whose checkpoint already holds every epoch.
    ``stop_after_epoch`` interrupts after that many epochs of this call and
    returns ``None``.
    """
    try:
        return _run_stage2(cfg, resume, _EpochCounter(stop_after_epoch))
    except _Interrupted:
        return None


def _run_stage2(cfg, resume, counter):
    paths = RunPaths(cfg.run.out_dir).ensure()
    records = read_feature_index(paths.features)
    train_recs = [r for r in records if r.split in (TRAIN, ONE_SHOT, FEW_SHOT)]
    vocab = build_vocab([r.caption for r in train_recs])
    vocab.save(paths.vocab)
    schedule = cfg.sigma_schedule() if cfg.stage2.cbs1d else None

    sd = _caption_split(records, "SD")
    regions = load_regions(paths.features, sd)
    torch.manual_seed(cfg.run.seed)
    model = MeshedCaptioner(cfg.captioner_config(len(vocab), regions.shape[-1]))
    _fit_with_checkpoints(cfg, paths, "stage2_SD", model, regions, [vocab.encode(r.caption) for r in sd],
                          cfg.caption_train_config(), schedule, 0, resume, counter)
    models = {"SD": model}
    for phase, domain in enumerate(DOMAINS[1:], start=1):
        if not cfg.stage2.target_finetune:
            models[domain] = model
            continue
        td = _caption_split(records, domain)
        tuned = copy.deepcopy(model)
        # fine-tuning continues the curriculum where source training left it
        offset = cfg.stage2.epochs
        cont = None if schedule is None else (lambda e, s=schedule: s(offset + e))
        _fit_with_checkpoints(cfg, paths, f"stage2_{domain}", tuned, load_regions(paths.features, td),
                              [vocab.encode(r.caption) for r in td], cfg.caption_train_config(finetune=True),
                              cont, phase, resume, counter)
        models[domain] = tuned
    return models


def load_stage2(cfg: ExperimentConfig) -> tuple[dict[str, MeshedCaptioner], Vocab]:
    paths = RunPaths(cfg.run.out_dir)
    if not paths.vocab.exists():
        raise FileNotFoundError(f"no vocabulary at {paths.vocab}; run train-stage2 first")
    vocab = Vocab.load(paths.vocab)
    records = read_feature_index(paths.features)
    d_in = np.load(paths.features / f"{records[0].id}.npy").shape[-1]
    models = {}
    for domain in DOMAINS:
        name = f"stage2_{domain}" if cfg.stage2.target_finetune or domain == "SD" else "stage2_SD"
        ckpt = load_checkpoint(paths.checkpoints / name, expected_hash=cfg.hash())
        m = MeshedCaptioner(cfg.captioner_config(len(vocab), d_in))
        m.load_state_dict(ckpt.state_dict("model"))
        m.set_sigma(ckpt.sigma)
        models[domain] = m
    return models, vocab


# -------------------------------------------------------------- evaluation

def evaluate_captions(generated: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> dict:
    if not generated:
        raise ValueError("cannot evaluate an empty split")
    pairs = [EvalPair(list(g), [list(r)]) for g, r in zip(generated, gold)]
    return caption_scores(pairs)


def run_eval(cfg: ExperimentConfig, models: dict | None = None, vocab: Vocab | None = None,
             domains: Sequence[str] = DOMAINS) -> dict[str, dict]:
    """Beam-search captions scored per domain next to stage-1 calibration; writes reports."""
    paths = RunPaths(cfg.run.out_dir).ensure()
    if models is None or vocab is None:
        models, vocab = load_stage2(cfg)
    records = read_feature_index(paths.features)
    if not paths.stage1_probs.exists():
        raise FileNotFoundError(f"stage-1 probabilities not found at {paths.stage1_probs}")
    with np.load(paths.stage1_probs) as z:
        probs, labels, pdomains = z["probs"], z["labels"], z["domains"]
    reports = {}
    for domain in domains:
        test = _eval_split(records, domain)
        if not test:
            raise ValueError(f"empty evaluation split for {domain}")
        regions = load_regions(paths.features, test)
        gen = generate(models[domain], regions, vocab, beam=cfg.eval.beam, max_len=cfg.stage2.max_len)
        gold = [r.caption for r in test]
        report = evaluate_captions(gen, gold)
        want = SOURCE if domain == "SD" else TARGET
        mask = pdomains == want
        report.update(calibration_scores(probs[mask], labels[mask], bins=cfg.eval.bins,
                                         threshold=cfg.eval.tace_threshold))
        report = {k: float(report[k]) for k in REPORT_KEYS}
        write_report(paths.reports / f"report_{domain}.txt", report, test, gen)
        write_generated(paths.reports / f"captions_{domain}.tsv", test, gen)
        reports[domain] = report
    return reports


def write_report(path, report: dict, records, generated) -> None:
    pairs = [EvalPair(list(g), [r.caption]) for g, r in zip(generated, records)]
    per_cider = cider(pairs)[0] if len(pairs) >= 2 else [float("nan")] * len(pairs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in REPORT_KEYS:
            fh.write(f"{k}\t{report[k]!r}\n")
        fh.write("\n")
        fh.write("id\tbleu4\trouge_l\tmeteor_lite\tcider\n")
        for r, p, c in zip(records, pairs, per_cider):
            fh.write(f"{r.id}\t{bleu(p, 4, smooth=True)!r}\t{rouge_l(p)!r}\t{meteor_lite(p)!r}\t{c!r}\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            break
        k, v = line.split("\t")
        out[k] = float(v)
    return out


def write_generated(path, records, generated) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, g in zip(records, generated):
            fh.write(f"{r.id}\t{' '.join(g)}\t{' '.join(r.caption)}\n")


# ------------------------------------------------------------------ matrix

# (config key that differs, metric, domain, direction)
_SINGLE_KEY_CHECKS = {
    "stage1.mode": ("supcon features beat ce features", "bleu4", "TD_few_shot", "higher"),
    "stage1.ls": ("stage-1 LS lowers ECE", "ece", "SD", "lower"),
    "stage2.cbs1d": ("1D CBS helps target BLEU-1", "bleu1", "TD_few_shot", "higher_or_equal"),
}
_NAMED_CHECKS = [
    ("CISC", "CI", "bleu4", "TD_few_shot", "higher"),
    ("CICL", "CI", "bleu4", "TD_few_shot", "higher"),
    ("CISC", "CICL", "bleu4", "TD_few_shot", "higher"),
]


def _differing_keys(a: ExperimentConfig, b: ExperimentConfig) -> set[str]:
    skip = {"run.name", "run.out_dir", "run.checkpoint_every", "data.root"}
    return {k for k in ExperimentConfig.keys() if k not in skip and a.get(k) != b.get(k)}


def _passes(left, right, direction):
    if direction == "higher":
        return left > right
    if direction == "lower":
        return left < right
    return left >= right


def directional_checks(configs: Sequence[ExperimentConfig], results: dict[str, dict]) -> list[dict]:
    checks = []
    by_name = {c.run.name: c for c in configs}
    for i, a in enumerate(configs):
        for b in configs[i + 1:]:
            diff = _differing_keys(a, b)
            if len(diff) != 1:
                continue
            key = diff.pop()
            if key not in _SINGLE_KEY_CHECKS:
                continue
            label, metric, domain, direction = _SINGLE_KEY_CHECKS[key]
            on, off = (a, b) if a.get(key) in (True, "supcon") else (b, a)
            checks.append(_check_row(label, on.run.name, off.run.name, metric, domain, direction, results))
    for left, right, metric, domain, direction in _NAMED_CHECKS:
        if left in by_name and right in by_name:
            checks.append(_check_row(f"{left} vs {right}", left, right, metric, domain, direction, results))
    return checks


def _check_row(label, left, right, metric, domain, direction, results):
    lv, rv = results[left][domain][metric], results[right][domain][metric]
    return {"check": label, "left": left, "right": right, "metric": metric, "domain": domain,
            "direction": direction, "left_value": lv, "right_value": rv, "pass": _passes(lv, rv, direction)}


def format_matrix(results: dict[str, dict], checks: list[dict]) -> str:
    lines = ["\t".join(["config", "domain", *REPORT_KEYS])]
    for name, per_domain in results.items():
        for domain in DOMAINS:
            if domain in per_domain:
                lines.append("\t".join([name, domain] + [f"{per_domain[domain][k]:.6f}" for k in REPORT_KEYS]))
    lines += ["", "# directional checks",
              "\t".join(["check", "left", "right", "metric", "domain", "direction", "left_value", "right_value",
                         "result"])]
    for c in checks:
        lines.append("\t".join([c["check"], c["left"], c["right"], c["metric"], c["domain"], c["direction"],
                                f"{c['left_value']:.6f}", f"{c['right_value']:.6f}",
                                "PASS" if c["pass"] else "FAIL"]))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> dict[str, dict]:
    if not annotation_path(cfg).exists():
        generate_data(cfg)
    run_stage1(cfg, resume=resume)
    models = run_stage2(cfg, resume=resume)
    vocab = Vocab.load(RunPaths(cfg.run.out_dir).vocab)
    return run_eval(cfg, models, vocab)


def run_matrix(configs: Sequence[ExperimentConfig], out_path=None) -> str:
    """Run every configuration end to end and emit one delimited comparison table."""
    if not configs:
        raise ValueError("run_matrix needs at least one config")
    names = [c.run.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"config names must be unique, got {names}")
    results = {c.run.name: run_experiment(c) for c in configs}
    table = format_matrix(results, directional_checks(configs, results))
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(table, encoding="utf-8")
    return table


def export_embeddings_file(cfg: ExperimentConfig, out_path, split: str = TEST, domain: str | None = None) -> Path:
    paths = RunPaths(cfg.run.out_dir)
    ckpt = load_checkpoint(paths.checkpoints / "stage1_final", expected_hash=cfg.hash())
    model = _model_from_arrays(cfg, ckpt, "model")
    samples = [s for s in load_data(cfg) if s.split == split and (domain is None or s.domain == domain)]
    rows = export_embeddings(model, samples)
    write_embeddings(out_path, rows)
    return Path(out_path)


__all__ = [
    "DOMAINS", "RunPaths", "generate_data", "load_data", "plan_increments", "run_stage1", "export_features",
    "read_feature_index", "load_regions", "run_stage2", "load_stage2", "run_eval", "evaluate_captions",
    "write_report", "read_report", "directional_checks", "format_matrix", "run_experiment", "run_matrix",
    "export_embeddings_file", "CheckpointError",
]
