"""Experiment configuration: typed sections read from and written to INI files.

Every key has a default. Unknown sections or keys are hard errors, because a
misspelt key would otherwise silently run the default experiment.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from ..backbone import BackboneConfig
from ..captioner import CaptionerConfig, CaptionTrainConfig
from ..cida import CIDAConfig, Mode
from ..metrics import DEFAULT_BINS, TACE_THRESHOLD
from ..smoothing import SIGMA_FLOOR, SigmaSchedule
from ..synthdata import DomainShift, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = "data"
    image_size: int = 64
    seed: int = 0
    train_per_class: int = 200
    val_per_class: int = 20
    test_per_class: int = 40
    target_pool: int = 12
    target_test: int = 20
    k_shot: int = 5
    hue_rotation: float = 30.0
    background_swap: int = 2
    noise_level: float = 0.03
    geometry_jitter: float = 0.1
    pixel_noise: float = 0.0
    occlusion: float = 0.0


@dataclass
class BackboneSection:
    stages: str = "32x2,64x2,128x2"
    proj_dim: int = 128
    stem_stride: int = 2


@dataclass
class Stage1Section:
    mode: str = "ce"  # ce | supcon
    cbs: bool = False
    ls: bool = False
    ls_epsilon: float = 0.1
    base_classes: str = ""  # comma list; empty = every source class
    source_increments: str = ""  # e.g. "4,5;6" - further source steps
    adapt_target: bool = True
    target_shot: str = "few_shot"  # few_shot | one_shot
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
    distill_T: float = 3.0
    temperature: float = 0.07
    memory_budget: int = 20
    selection: str = "herding"
    ce_augment: str = "light"
    supcon_hue: float = 0.1


@dataclass
class CurriculumSection:
    sigma0: float = 1.0
    decay: float = 0.9
    period: int = 2
    floor: float = SIGMA_FLOOR


@dataclass
class Stage2Section:
    cbs1d: bool = True
    ls: bool = False
    ls_epsilon: float = 0.1
    epochs: int = 50
    batch_size: int = 50
    lr: float = 5e-4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 3
    memory_slots: int = 8
    dropout: float = 0.1
    max_len: int = 20
    target_finetune: bool = True
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4


@dataclass
class EvalSection:
    beam: int = 5
    bins: int = DEFAULT_BINS
    tace_threshold: float = TACE_THRESHOLD


@dataclass
class RunSection:
    name: str = "default"
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 1


SECTIONS = {
    "data": DataSection, "backbone": BackboneSection, "stage1": Stage1Section,
    "curriculum": CurriculumSection, "stage2": Stage2Section, "eval": EvalSection, "run": RunSection,
}

# named stage-1/stage-2 combinations of the experiment grid
PRESETS = {
    "CI": {"stage1.mode": "ce", "stage1.cbs": False, "stage1.ls": False, "stage2.cbs1d": False, "stage2.ls": False},
    "CICL": {"stage1.mode": "ce", "stage1.cbs": True, "stage1.ls": True, "stage2.cbs1d": True, "stage2.ls": True},
    "CISC": {"stage1.mode": "supcon", "stage1.cbs": True, "stage1.ls": False, "stage2.cbs1d": True, "stage2.ls": True},
}

# keys that only move files around; they do not change the experiment
_UNHASHED = {"data.root", "run.out_dir", "run.name", "run.checkpoint_every"}


def _parse_value(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ access
    def get(self, dotted: str):
        section, key = self._split(dotted)
        return getattr(getattr(self, section), key)

    def set(self, dotted: str, value) -> None:
        section, key = self._split(dotted)
        sec = getattr(self, section)
        kind = get_type_hints(type(sec))[key]
        if isinstance(value, str) and kind is not str:
            value = _parse_value(kind, value, dotted)
        elif kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        setattr(sec, key, value)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        for k, v in overrides.items():
            cfg.set(k, v)
        cfg.validate()
        return cfg

    @staticmethod
    def _split(dotted):
        if "." not in dotted:
            raise ConfigError(f"config keys look like section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        return section, key

    @classmethod
    def keys(cls) -> list[str]:
        return [f"{s}.{f.name}" for s, klass in SECTIONS.items() for f in fields(klass)]

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls().with_overrides({**PRESETS[name], "run.name": name, **overrides})

    # ------------------------------------------------------- validation
    def validate(self) -> None:
        s1, s2, d = self.stage1, self.stage2, self.data
        if s1.mode not in ("ce", "supcon"):
            raise ConfigError(f"stage1.mode must be 'ce' or 'supcon', got {s1.mode!r}")
        if s1.target_shot not in ("few_shot", "one_shot"):
            raise ConfigError("stage1.target_shot must be 'few_shot' or 'one_shot'")
        if s1.selection not in ("herding", "random"):
            raise ConfigError("stage1.selection must be 'herding' or 'random'")
        if s1.ce_augment not in ("none", "light", "strong"):
            raise ConfigError("stage1.ce_augment must be one of none/light/strong")
        for name, eps in (("stage1", s1.ls_epsilon), ("stage2", s2.ls_epsilon)):
            if not 0.0 <= eps < 1.0:
                raise ConfigError(f"{name}.ls_epsilon must lie in [0, 1)")
        for key in ("batch_size", "epochs_train", "epochs_finetune", "memory_budget"):
            if getattr(s1, key) <= 0:
                raise ConfigError(f"stage1.{key} must be positive")
        for key in ("batch_size", "epochs", "max_len"):
            if getattr(s2, key) <= 0:
                raise ConfigError(f"stage2.{key} must be positive")
        if self.eval.beam < 1:
            raise ConfigError("eval.beam must be >= 1")
        if d.k_shot < 1 or d.k_shot + 1 > d.target_pool:
            raise ConfigError("data.k_shot must satisfy 1 <= k_shot < target_pool")
        self.backbone_config(num_classes=1)  # parses stages
        self.base_classes()
        self.source_increments()

    # ------------------------------------------------------ derived views
    def scene_spec(self) -> SceneSpec:
        d = self.data
        return SceneSpec(image_size=d.image_size, seed=d.seed, pixel_noise=d.pixel_noise, occlusion=d.occlusion)

    def domain_shift(self) -> DomainShift:
        d = self.data
        return DomainShift(hue_rotation=d.hue_rotation, background_swap=d.background_swap,
                           noise_level=d.noise_level, geometry_jitter=d.geometry_jitter, seed=d.seed)

    def split_counts(self) -> dict:
        d = self.data
        return {"train": d.train_per_class, "val": d.val_per_class, "test": d.test_per_class,
                "target_pool": d.target_pool, "target_test": d.target_test}

    def backbone_config(self, num_classes: int) -> BackboneConfig:
        try:
            stages = tuple(tuple(int(x) for x in part.lower().split("x"))
                           for part in self.backbone.stages.split(","))
            if any(len(s) != 2 for s in stages):
                raise ValueError
        except ValueError:
            raise ConfigError(f"backbone.stages must look like '32x2,64x2', got {self.backbone.stages!r}") from None
        try:
            return BackboneConfig(stages=stages, input_size=self.data.image_size, proj_dim=self.backbone.proj_dim,
                                  cbs_enabled=self.stage1.cbs, num_classes=num_classes,
                                  stem_stride=self.backbone.stem_stride, sigma_floor=self.curriculum.floor)
        except ValueError as exc:
            raise ConfigError(f"backbone: {exc}") from None

    def base_classes(self) -> tuple[int, ...] | None:
        text = self.stage1.base_classes.strip()
        if not text:
            return None
        try:
            return tuple(int(x) for x in text.split(","))
        except ValueError:
            raise ConfigError(f"stage1.base_classes must be a comma list of ints, got {text!r}") from None

    def source_increments(self) -> list[tuple[int, ...]]:
        text = self.stage1.source_increments.strip()
        if not text:
            return []
        try:
            return [tuple(int(x) for x in step.split(",")) for step in text.split(";") if step.strip()]
        except ValueError:
            raise ConfigError(f"stage1.source_increments must look like '4,5;6', got {text!r}") from None

    def cida_config(self, seed: int | None = None) -> CIDAConfig:
        s = self.stage1
        return CIDAConfig(batch_size=s.batch_size, lr=s.lr, momentum=s.momentum, weight_decay=s.weight_decay,
                          lr_decay=s.lr_decay, lr_step=s.lr_step, epochs_train=s.epochs_train,
                          epochs_finetune=s.epochs_finetune, lr_finetune=s.lr_finetune,
                          classifier_epochs=s.classifier_epochs, classifier_lr=s.classifier_lr,
                          ls_epsilon=s.ls_epsilon if s.ls else 0.0, distill_T=s.distill_T,
                          temperature=s.temperature, memory_budget=s.memory_budget, selection=s.selection,
                          ce_augment=s.ce_augment, supcon_hue=s.supcon_hue,
                          seed=self.run.seed if seed is None else seed)

    @property
    def stage1_mode(self) -> Mode:
        return Mode.SUPCON_CIDA if self.stage1.mode == "supcon" else Mode.CE_DISTILL

    def sigma_schedule(self) -> SigmaSchedule:
        c = self.curriculum
        return SigmaSchedule(sigma0=c.sigma0, decay=c.decay, period=c.period, floor=c.floor)

    def captioner_config(self, vocab_size: int, d_in: int) -> CaptionerConfig:
        s = self.stage2
        return CaptionerConfig(vocab_size=vocab_size, d_in=d_in, d_model=s.d_model, n_heads=s.n_heads, d_ff=s.d_ff,
                               n_layers=s.n_layers, memory_slots=s.memory_slots, dropout=s.dropout,
                               max_len=s.max_len, cbs=s.cbs1d, sigma_floor=self.curriculum.floor)

    def caption_train_config(self, finetune: bool = False) -> CaptionTrainConfig:
        s = self.stage2
        return CaptionTrainConfig(epochs=s.finetune_epochs if finetune else s.epochs, batch_size=s.batch_size,
                                  lr=s.finetune_lr if finetune else s.lr,
                                  ls_epsilon=s.ls_epsilon if s.ls else 0.0, seed=self.run.seed)

    # ----------------------------------------------------------------- io
    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        for name, values in d.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            known = {f.name for f in fields(SECTIONS[name])}
            extra = set(values) - known
            if extra:
                raise ConfigError(f"unknown key(s) {sorted(extra)} in section [{name}]")
            kwargs[name] = SECTIONS[name](**values)
        return cls(**kwargs)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_format_value(v)}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    @classmethod
    def from_ini(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keep key case so typos are caught exactly
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(encoding="utf-8"), source=str(path))

    def hash(self) -> str:
        flat = {k: self.get(k) for k in self.keys() if k not in _UNHASHED}
        blob = json.dumps(flat, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self, **section_updates) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        for name, sec in section_updates.items():
            setattr(cfg, name, replace(getattr(cfg, name), **sec))
        cfg.validate()
        return cfg
