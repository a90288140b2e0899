"""Class-incremental domain adaptation: the four-step increment loop.

One increment is

1. :func:`build_increment_trainset` - memory exemplars plus the new-class data,
2. :func:`train_increment` - CE + logit distillation, or SupCon + feature
   distillation with a decoupled classifier fitted afterwards,
3. :func:`balanced_finetune` - a short pass over a class-balanced subset,
4. :func:`update_memory` - herding selection of exemplars for the new classes.

The teacher for increment ``t`` is a frozen copy of the model after ``t - 1``.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .augment import augment_batch
from .backbone import FeatureExtractor, encode_images, images_to_tensor
from .smoothing import SigmaSchedule

log = logging.getLogger(__name__)


class Mode(str, Enum):
    CE_DISTILL = "CE_DISTILL"
    SUPCON_CIDA = "SUPCON_CIDA"


@dataclass
class CIDAConfig:
    batch_size: int = 20
    lr: float = 1e-3
    momentum: float = 0.6
    weight_decay: float = 1e-4
    lr_decay: float = 0.8
    lr_step: int = 5
    epochs_train: int = 50
    epochs_finetune: int = 15
    lr_finetune: float = 1e-4
    classifier_epochs: int = 15
    classifier_lr: float = 0.1
    ls_epsilon: float = 0.0
    distill_T: float = 3.0
    temperature: float = 0.07
    memory_budget: int = 20
    use_distillation: bool = True
    selection: str = "herding"
    ce_augment: str = "light"
    supcon_hue: float = 0.1
    seed: int = 0


@dataclass
class IncrementPlan:
    step_index: int
    new_classes: tuple[int, ...]
    mode: Mode = Mode.CE_DISTILL
    epochs_train: int = 50
    epochs_finetune: int = 15
    old_classes: tuple[int, ...] = ()

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.new_classes = tuple(sorted(self.new_classes))
        self.old_classes = tuple(self.old_classes)
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if not self.new_classes:
            raise ValueError("an increment needs at least one new class")
        if set(self.new_classes) & set(self.old_classes):
            raise ValueError("new classes overlap previously seen classes")
        if self.epochs_train <= 0 or self.epochs_finetune <= 0:
            raise ValueError("epoch counts must be positive")

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return self.old_classes + self.new_classes

    @property
    def class_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.seen_classes)}

    @property
    def lambda_old(self) -> float:
        return losses.old_class_weight(len(self.old_classes), len(self.seen_classes))


@dataclass
class ExemplarMemory:
    budget: int = 20
    per_class: dict[int, list[str]] = field(default_factory=dict)
    store: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for c, ids in self.per_class.items():
            if len(ids) > self.budget:
                raise ValueError(f"class {c} holds {len(ids)} exemplars, budget is {self.budget}")
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate exemplar ids in class {c}")

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def samples(self, class_id: int) -> list:
        return [self.store[i] for i in self.per_class[class_id]]

    def all_samples(self) -> list:
        return [s for c in self.classes for s in self.samples(c)]

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    def to_dict(self) -> dict:
        return {"budget": self.budget, "per_class": {str(c): list(v) for c, v in sorted(self.per_class.items())}}

    @classmethod
    def from_dict(cls, d: dict, samples_by_id: dict | None = None) -> "ExemplarMemory":
        per_class = {int(c): list(v) for c, v in d["per_class"].items()}
        store = {}
        if samples_by_id is not None:
            store = {i: samples_by_id[i] for ids in per_class.values() for i in ids}
        return cls(budget=int(d["budget"]), per_class=per_class, store=store)


class TeacherSnapshot:
    """Frozen deep copy of a model, always evaluated in eval mode."""

    def __init__(self, model: FeatureExtractor):
        self._model = copy.deepcopy(model)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    @torch.no_grad()
    def features(self, images):
        self._model.eval()
        return self._model.forward_features(images)

    @torch.no_grad()
    def logits(self, images):
        pooled, _ = self.features(images)
        return self._model.classify(pooled)

    @torch.no_grad()
    def project(self, images):
        pooled, _ = self.features(images)
        return self._model.project(pooled)

    def state_dict(self):
        return self._model.state_dict()


def snapshot_teacher(model: FeatureExtractor) -> TeacherSnapshot:
    return TeacherSnapshot(model)


# ------------------------------------------------------------------ step 1

def build_increment_trainset(memory: ExemplarMemory, new_data: Sequence) -> list:
    """Memory samples (by class id, stored order) followed by ``new_data``."""
    seen = set(memory.per_class)
    bad = {s.label for s in new_data} & seen
    if bad:
        raise ValueError(f"new data contains already-seen classes {sorted(bad)}")
    mem_ids = {i for ids in memory.per_class.values() for i in ids}
    dup = mem_ids & {s.id for s in new_data}
    if dup:
        raise ValueError(f"sample ids present in both memory and new data: {sorted(dup)[:5]}")
    return memory.all_samples() + list(new_data)


# ------------------------------------------------------------------ step 2

def make_optimizer(model, lr, cfg: CIDAConfig, params=None):
    opt = torch.optim.SGD(params if params is not None else model.parameters(), lr=lr,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step, gamma=cfg.lr_decay)
    return opt, sched


def lr_at(epoch: int, lr0: float, decay: float = 0.8, step: int = 5) -> float:
    return lr0 * decay ** (epoch // step)


def _epoch_seed(seed, *parts):
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def _batches(n, batch_size, seed, step, epoch, phase):
    g = torch.Generator().manual_seed(_epoch_seed(seed, step, epoch, phase))
    order = torch.randperm(n, generator=g)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _prepare(samples, plan):
    idx = plan.class_index
    unknown = {s.label for s in samples} - set(idx)
    if unknown:
        raise ValueError(f"training samples carry classes outside the plan: {sorted(unknown)}")
    images = images_to_tensor([s.image for s in samples])
    labels = torch.tensor([idx[s.label] for s in samples], dtype=torch.long)
    ids = [s.id for s in samples]
    return images, labels, ids


def _check_finite(loss, where):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss ({loss.item()}) during {where}")


def _ce_distill_loss(model, teacher, x, y, plan, cfg, sigma):
    logits = model(x, sigma)
    ce = losses.ce_with_ls(logits, y, cfg.ls_epsilon)
    lam = plan.lambda_old if cfg.use_distillation else 0.0
    if teacher is None or lam == 0:
        return ce
    k_old = len(plan.old_classes)
    distill = losses.logit_distill_loss(logits[:, :k_old], teacher.logits(x)[:, :k_old], cfg.distill_T)
    return losses.ci_total_loss(ce, distill, lam)


def _supcon_step_loss(model, teacher, v1, v2, y, plan, cfg, sigma):
    model.set_sigma(sigma)
    pooled, _ = model.forward_features(torch.cat([v1, v2]))
    z = model.project(pooled)
    loss = losses.supcon_loss(z, torch.cat([y, y]), cfg.temperature, reduction="mean", validate=False)
    if teacher is not None and plan.lambda_old > 0 and cfg.use_distillation:
        n = v1.shape[0]
        t1, t2 = teacher.project(v1), teacher.project(v2)
        fd = losses.feature_distill_loss(z[:n], z[n:], t1, t2, cfg.temperature,
                                         reduction="mean", validate=False)
        loss = loss + plan.lambda_old * fd
    return loss


def _prepare_model(model, plan, cfg):
    K = len(plan.seen_classes)
    if model.num_classes < K:
        model.classifier = _expand(model.classifier, K, cfg.seed, plan.step_index)
    elif model.num_classes > K:
        raise ValueError(f"model has {model.num_classes} outputs but the plan sees {K} classes")


def _expand(head, K, seed, step):
    from .backbone import expand_head
    g = torch.Generator().manual_seed(_epoch_seed(seed, step, 9_999))
    return expand_head(head, K, generator=g)


def train_increment(model: FeatureExtractor, teacher: TeacherSnapshot | None, trainset: Sequence,
                    plan: IncrementPlan, sigma_schedule: SigmaSchedule | None = None,
                    cfg: CIDAConfig | None = None, *, resume: dict | None = None,
                    on_epoch_end: Callable[[dict], None] | None = None):
    """Train one increment; returns ``(model, trace)`` with one trace entry per epoch.

    ``resume`` may carry ``epoch`` (next epoch to run), ``optimizer`` and
    ``scheduler`` state dicts. ``on_epoch_end`` receives a dict holding the
    training objects (``model``, ``optimizer``, ``scheduler``) plus ``epoch`` and ``trace``.
    """
    cfg = cfg or CIDAConfig()
    if plan.step_index > 0 and teacher is None:
        raise ValueError("increments after the first need a teacher snapshot")
    if not trainset:
        raise ValueError("empty training set")
    _prepare_model(model, plan, cfg)
    images, labels, ids = _prepare(trainset, plan)
    opt, sched = make_optimizer(model, cfg.lr, cfg)
    start = 0
    trace = []
    if resume:
        opt.load_state_dict(resume["optimizer"])
        sched.load_state_dict(resume["scheduler"])
        start = int(resume["epoch"])
        trace = list(resume.get("trace", []))

    for epoch in range(start, plan.epochs_train):
        sigma = sigma_schedule(epoch) if sigma_schedule is not None else None
        model.set_sigma(sigma)
        model.train()
        torch.manual_seed(_epoch_seed(cfg.seed, plan.step_index, epoch, 1))
        lr = opt.param_groups[0]["lr"]
        total, count = 0.0, 0
        for b in _batches(len(ids), cfg.batch_size, cfg.seed, plan.step_index, epoch, 0):
            bid = [ids[i] for i in b]
            x, y = images[b], labels[b]
            if plan.mode is Mode.CE_DISTILL:
                x = augment_batch(x, bid, cfg.seed, epoch, 0, cfg.ce_augment)
                loss = _ce_distill_loss(model, teacher, x, y, plan, cfg, sigma)
            else:
                v1 = augment_batch(x, bid, cfg.seed, epoch, 1, "strong", cfg.supcon_hue)
                v2 = augment_batch(x, bid, cfg.seed, epoch, 2, "strong", cfg.supcon_hue)
                loss = _supcon_step_loss(model, teacher, v1, v2, y, plan, cfg, sigma)
            _check_finite(loss, f"increment {plan.step_index} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            count += len(b)
        sched.step()
        trace.append({"epoch": epoch, "loss": total / count, "lr": lr, "sigma": sigma})
        log.info("increment %d epoch %d loss %.4f lr %.2e", plan.step_index, epoch, total / count, lr)
        if on_epoch_end is not None:
            on_epoch_end({"model": model, "optimizer": opt, "scheduler": sched, "epoch": epoch,
                          "trace": trace, "phase": "train"})

    if plan.mode is Mode.SUPCON_CIDA:
        fit_classifier(model, trainset, plan, cfg, epochs=cfg.classifier_epochs, lr=cfg.classifier_lr)
    return model, trace


@torch.no_grad()
def _frozen_features(model, samples):
    pooled, _, _, _ = encode_images(model, [s.image for s in samples])
    return pooled


def fit_classifier(model, samples, plan, cfg, epochs, lr):
    """Fit the linear classifier on frozen pooled features with CE (+LS)."""
    feats = _frozen_features(model, samples)
    labels = torch.tensor([plan.class_index[s.label] for s in samples])
    opt = torch.optim.SGD(model.classifier.parameters(), lr=lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step, gamma=cfg.lr_decay)
    for epoch in range(epochs):
        for b in _batches(len(samples), cfg.batch_size, cfg.seed, plan.step_index, epoch, 3):
            loss = losses.ce_with_ls(model.classify(feats[b]), labels[b], cfg.ls_epsilon)
            _check_finite(loss, "classifier fitting")
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return model


# ------------------------------------------------------------------ step 3

def balanced_subset(memory: ExemplarMemory, new_data: Sequence, plan: IncrementPlan) -> list:
    """``m`` samples per seen class with ``m = min(budget, smallest availability)``."""
    by_class: dict[int, list] = {c: [] for c in plan.seen_classes}
    for c in plan.old_classes:
        if c in memory.per_class:
            by_class[c] = memory.samples(c)
    for s in new_data:
        by_class.setdefault(s.label, []).append(s)
    empty = [c for c, v in by_class.items() if not v]
    if empty:
        raise ValueError(f"seen classes without any sample for balanced fine-tuning: {empty}")
    m = min(memory.budget, min(len(v) for v in by_class.values()))
    return [s for c in plan.seen_classes for s in by_class[c][:m]]


def balanced_finetune(model: FeatureExtractor, memory: ExemplarMemory, new_data: Sequence,
                      plan: IncrementPlan, cfg: CIDAConfig | None = None,
                      teacher: TeacherSnapshot | None = None,
                      sigma_schedule: SigmaSchedule | None = None):
    """Short fine-tune on a class-balanced subset at the lower fine-tuning lr.

    CE mode fine-tunes the whole network with the increment objective; SupCon
    mode keeps the representation frozen and refits only the classifier.
    """
    cfg = cfg or CIDAConfig()
    subset = balanced_subset(memory, new_data, plan)
    if plan.mode is Mode.SUPCON_CIDA:
        fit_classifier(model, subset, plan, cfg, epochs=plan.epochs_finetune,
                       lr=cfg.classifier_lr * cfg.lr_finetune / cfg.lr)
        return model
    images, labels, ids = _prepare(subset, plan)
    opt, sched = make_optimizer(model, cfg.lr_finetune, cfg)
    # the curriculum has finished by the time fine-tuning starts
    sigma = sigma_schedule(plan.epochs_train) if sigma_schedule is not None else None
    for epoch in range(plan.epochs_finetune):
        model.train()
        torch.manual_seed(_epoch_seed(cfg.seed, plan.step_index, epoch, 2))
        for b in _batches(len(ids), cfg.batch_size, cfg.seed, plan.step_index, epoch, 4):
            x = augment_batch(images[b], [ids[i] for i in b], cfg.seed, 10_000 + epoch, 0, cfg.ce_augment)
            loss = _ce_distill_loss(model, teacher, x, labels[b], plan, cfg, sigma)
            _check_finite(loss, "balanced fine-tuning")
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return model


# ------------------------------------------------------------------ step 4

def herding_selection(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding: each pick brings the running exemplar mean closest to the class mean.

    Ties go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    m = min(m, n)
    mu = features.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        cand = (running[None, :] + features) / k
        dist = np.linalg.norm(mu[None, :] - cand, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += features[i]
    return chosen


def best_subset_bruteforce(features: np.ndarray, m: int) -> tuple[int, ...]:
    """Exhaustive search for the size-``m`` subset whose mean is nearest the full mean."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    best, best_d = None, math.inf
    for combo in combinations(range(len(features)), m):
        d = np.linalg.norm(features[list(combo)].mean(axis=0) - mu)
        if d < best_d - 1e-15:
            best, best_d = combo, d
    return best


def update_memory(memory: ExemplarMemory, new_data: Sequence, model: FeatureExtractor | None,
                  budget: int | None = None, selection: str = "herding", seed: int = 0) -> ExemplarMemory:
    """Add up to ``budget`` exemplars per new class; existing classes are kept as they are."""
    budget = memory.budget if budget is None else budget
    per_class = {c: list(v) for c, v in memory.per_class.items()}
    store = dict(memory.store)
    by_class: dict[int, list] = {}
    for s in new_data:
        by_class.setdefault(s.label, []).append(s)
    for c in sorted(by_class):
        if c in memory.per_class:
            continue
        group = by_class[c]
        if len(group) <= budget:
            picks = list(range(len(group)))
        elif selection == "random":
            rng = np.random.default_rng([seed, c])
            picks = sorted(rng.choice(len(group), size=budget, replace=False).tolist())
        elif selection == "herding":
            if model is None:
                raise ValueError("herding needs a model to score features")
            feats = _frozen_features(model, group)
            feats = F.normalize(feats, dim=1).numpy()
            picks = herding_selection(feats, budget)
        else:
            raise ValueError(f"unknown selection rule {selection!r}")
        per_class[c] = [group[i].id for i in picks]
        store.update({group[i].id: group[i] for i in picks})
    return ExemplarMemory(budget=budget, per_class=per_class, store=store)


# -------------------------------------------------------------- evaluation

@dataclass
class IncrementEval:
    per_class: dict[int, float]
    mean_accuracy: float
    old_class_accuracy: float | None
    forgetting: float | None
    absent: list[int] = field(default_factory=list)

    def to_dict(self):
        return {"per_class": {str(k): v for k, v in self.per_class.items()},
                "mean_accuracy": self.mean_accuracy, "old_class_accuracy": self.old_class_accuracy,
                "forgetting": self.forgetting, "absent": self.absent}


@torch.no_grad()
def predict_classes(model, samples, seen_classes: Sequence[int]):
    _, _, _, logits = encode_images(model, [s.image for s in samples])
    idx = logits.argmax(dim=1).numpy()
    return np.asarray(seen_classes)[idx], F.softmax(logits, dim=1).numpy()


def evaluate_increment(model, testsets: dict[int, Sequence], seen_classes: Sequence[int],
                       old_classes: Sequence[int] = (), previous_old_accuracy: float | None = None,
                       predict: Callable | None = None) -> IncrementEval:
    """Per-class accuracy over seen classes and the drop in old-class accuracy.

    ``previous_old_accuracy`` is the mean accuracy that the old classes reached
    at the previous step; forgetting is ``None`` without it. ``predict`` can
    replace the model's own classifier (any callable ``samples -> class ids``).
    """
    if not seen_classes:
        raise ValueError("no seen classes to evaluate")
    per_class, absent = {}, []
    for c in seen_classes:
        samples = list(testsets.get(c, []))
        if not samples:
            absent.append(c)
            continue
        pred = predict(samples) if predict is not None else predict_classes(model, samples, seen_classes)[0]
        per_class[c] = float(np.mean(np.asarray(pred) == c))
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    old = [per_class[c] for c in old_classes if c in per_class]
    old_acc = float(np.mean(old)) if old else None
    forgetting = None
    if previous_old_accuracy is not None and old_acc is not None:
        forgetting = previous_old_accuracy - old_acc
    return IncrementEval(per_class, mean, old_acc, forgetting, absent)


def write_increment_manifest(path, plan: IncrementPlan, memory: ExemplarMemory, metrics: dict) -> None:
    doc = {"step_index": plan.step_index, "mode": plan.mode.value,
           "old_classes": list(plan.old_classes), "new_classes": list(plan.new_classes),
           "memory": memory.to_dict(), "metrics": metrics}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_increment_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
