"""scikit-learn style wrappers around the stage-1 extractor and the stage-2 captioner.

``CIDAFeatureExtractor.fit`` trains the first increment; every later
``partial_fit`` call is one class-incremental step with a teacher snapshot,
exemplar memory and balanced fine-tuning. ``MeshedCaptionModel`` fits on
region features and predicts token lists with beam search.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import cida
from .backbone import BackboneConfig, FeatureExtractor, encode_images
from .captioner import (CaptionerConfig, CaptionTrainConfig, MeshedCaptioner, beam_search, build_vocab,
                        fit_captioner)
from .metrics import EvalPair, corpus_bleu
from .smoothing import SIGMA_FLOOR, SigmaSchedule
from .validation import check_captions, check_images, check_labels, check_regions


@dataclass
class _Item:
    id: str
    image: np.ndarray
    label: int


def _items(X, y, ids, offset):
    if ids is None:
        ids = [f"x{offset + i:07d}" for i in range(len(X))]
    elif len(ids) != len(X):
        raise ValueError("ids must match the number of images")
    return [_Item(str(i), img, int(lbl)) for i, img, lbl in zip(ids, X, y)]


class CIDAFeatureExtractor(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Class-incremental feature extractor; ``transform`` returns pooled features."""

    def __init__(self, stages=((32, 2), (64, 2), (128, 2)), image_size=64, proj_dim=128, mode="ce",
                 cbs=False, ls_epsilon=0.0, epochs=50, finetune_epochs=15, batch_size=20, lr=1e-3,
                 lr_finetune=1e-4, momentum=0.6, weight_decay=1e-4, memory_budget=20, temperature=0.07,
                 distill_T=3.0, sigma0=1.0, sigma_decay=0.9, sigma_period=2, selection="herding",
                 random_state=0):
        self.stages = stages
        self.image_size = image_size
        self.proj_dim = proj_dim
        self.mode = mode
        self.cbs = cbs
        self.ls_epsilon = ls_epsilon
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_finetune = lr_finetune
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.memory_budget = memory_budget
        self.temperature = temperature
        self.distill_T = distill_T
        self.sigma0 = sigma0
        self.sigma_decay = sigma_decay
        self.sigma_period = sigma_period
        self.selection = selection
        self.random_state = random_state

    def _cida_config(self):
        return cida.CIDAConfig(batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                               weight_decay=self.weight_decay, epochs_train=self.epochs,
                               epochs_finetune=self.finetune_epochs, lr_finetune=self.lr_finetune,
                               ls_epsilon=self.ls_epsilon, distill_T=self.distill_T,
                               temperature=self.temperature, memory_budget=self.memory_budget,
                               selection=self.selection, seed=self.random_state)

    def _mode(self):
        if self.mode not in ("ce", "supcon"):
            raise ValueError(f"mode must be 'ce' or 'supcon', got {self.mode!r}")
        return cida.Mode.SUPCON_CIDA if self.mode == "supcon" else cida.Mode.CE_DISTILL

    def _schedule(self):
        if not self.cbs:
            return None
        return SigmaSchedule(self.sigma0, self.sigma_decay, self.sigma_period, SIGMA_FLOOR)

    def fit(self, X, y, ids=None):
        """Train the first increment on every class present in ``y`` (forgets earlier fits)."""
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        torch.manual_seed(self.random_state)
        classes = tuple(sorted(set(y.tolist())))
        self.model_ = FeatureExtractor(BackboneConfig(stages=self.stages, input_size=self.image_size,
                                                      proj_dim=self.proj_dim, cbs_enabled=self.cbs,
                                                      num_classes=len(classes)))
        self.memory_ = cida.ExemplarMemory(budget=self.memory_budget)
        self.classes_ = np.array([], dtype=np.int64)
        self.increments_ = []
        self.n_seen_ = 0
        return self._increment(X, y, ids, classes)

    def partial_fit(self, X, y, ids=None):
        """Add the classes in ``y`` as one new increment; the first call behaves like ``fit``."""
        if not hasattr(self, "model_"):
            return self.fit(X, y, ids)
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        return self._increment(X, y, ids, tuple(sorted(set(y.tolist()))))

    def _increment(self, X, y, ids, classes):
        cfg = self._cida_config()
        step = len(self.increments_)
        plan = cida.IncrementPlan(step, classes, self._mode(), self.epochs, self.finetune_epochs,
                                  old_classes=tuple(int(c) for c in self.classes_))
        data = _items(X, y, ids, self.n_seen_)
        self.n_seen_ += len(X)
        teacher = cida.snapshot_teacher(self.model_) if step > 0 else None
        trainset = cida.build_increment_trainset(self.memory_, data)
        schedule = self._schedule()
        _, trace = cida.train_increment(self.model_, teacher, trainset, plan, schedule, cfg)
        if step > 0:
            cida.balanced_finetune(self.model_, self.memory_, data, plan, cfg, teacher, schedule)
        self.memory_ = cida.update_memory(self.memory_, data, self.model_, self.memory_budget,
                                          self.selection, self.random_state)
        self.classes_ = np.array(plan.seen_classes, dtype=np.int64)
        self.increments_.append({"step": step, "classes": list(classes), "trace": trace})
        return self

    def _encode(self, X):
        check_is_fitted(self, "model_")
        return encode_images(self.model_, check_images(X, self.image_size))

    def transform(self, X):
        return self._encode(X)[0].numpy()

    def transform_regions(self, X):
        """``(n, N_regions, d_feat)`` region features for the captioner."""
        return self._encode(X)[1].numpy()

    def embed(self, X):
        """Unit-norm projection-head embeddings."""
        return self._encode(X)[2].numpy()

    def predict_proba(self, X):
        return torch.softmax(self._encode(X)[3], dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class MeshedCaptionModel(BaseEstimator):
    """Meshed transformer captioner over ``(n, N, d)`` region features."""

    def __init__(self, d_model=128, n_heads=4, d_ff=256, n_layers=3, memory_slots=8, dropout=0.1,
                 max_len=20, cbs=True, ls_epsilon=0.0, epochs=50, batch_size=50, lr=5e-4, beam=5,
                 sigma0=1.0, sigma_decay=0.9, sigma_period=2, min_count=1, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.memory_slots = memory_slots
        self.dropout = dropout
        self.max_len = max_len
        self.cbs = cbs
        self.ls_epsilon = ls_epsilon
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beam = beam
        self.sigma0 = sigma0
        self.sigma_decay = sigma_decay
        self.sigma_period = sigma_period
        self.min_count = min_count
        self.random_state = random_state

    def fit(self, R, captions):
        R = check_regions(R)
        caps = check_captions(captions, len(R))
        self.vocab_ = build_vocab(caps, self.min_count)
        torch.manual_seed(self.random_state)
        self.model_ = MeshedCaptioner(CaptionerConfig(
            vocab_size=len(self.vocab_), d_in=R.shape[2], d_model=self.d_model, n_heads=self.n_heads,
            d_ff=self.d_ff, n_layers=self.n_layers, memory_slots=self.memory_slots, dropout=self.dropout,
            max_len=self.max_len, cbs=self.cbs))
        schedule = SigmaSchedule(self.sigma0, self.sigma_decay, self.sigma_period) if self.cbs else None
        self.trace_ = fit_captioner(self.model_, torch.from_numpy(R), [self.vocab_.encode(c) for c in caps],
                                    CaptionTrainConfig(self.epochs, self.batch_size, self.lr, self.ls_epsilon,
                                                       self.random_state), schedule)
        self.n_features_in_ = R.shape[2]
        return self

    def predict(self, R):
        check_is_fitted(self, "model_")
        R = torch.from_numpy(check_regions(R, self.n_features_in_))
        return [self.vocab_.decode(beam_search(self.model_, r, self.beam, self.max_len).tokens) for r in R]

    def score(self, R, captions):
        """Corpus BLEU-4 of the beam-search captions."""
        refs = check_captions(captions, len(R))
        pred = self.predict(R)
        return corpus_bleu([EvalPair(p, [r]) for p, r in zip(pred, refs)], 4)
