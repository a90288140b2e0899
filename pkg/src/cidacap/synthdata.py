"""Procedural "surgical scene" images with grammar captions.

Every scene shows one instrument: a grey shaft entering from the border and a
coloured tip whose shape and colour identify the instrument class. The shaft
direction encodes the interaction and the background texture encodes the
tissue. Captions follow ``<instrument> is <interaction> <tissue>``.

Randomness is drawn from per-sample streams keyed by ``(seed, domain, split,
class, index)``, so any sample can be regenerated on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

SOURCE, TARGET = "SOURCE", "TARGET"
DOMAINS = (SOURCE, TARGET)
TRAIN, VAL, ONE_SHOT, FEW_SHOT, TEST = "TRAIN", "VAL", "ONE_SHOT", "FEW_SHOT", "TEST"
SPLITS = (TRAIN, VAL, ONE_SHOT, FEW_SHOT, TEST)
TARGET_ONLY_SPLITS = (ONE_SHOT, FEW_SHOT)


@dataclass(frozen=True)
class Archetype:
    name: str
    tip: str
    color: tuple[int, int, int]
    color_tol: int = 12
    target_only: bool = False


@dataclass(frozen=True)
class Tissue:
    name: str
    color: tuple[int, int, int]
    grain: int  # coarse grid size of the value-noise texture


DEFAULT_ARCHETYPES = (
    Archetype("grasper", "circle", (230, 40, 40)),
    Archetype("forceps", "square", (230, 200, 30)),
    Archetype("scissors", "triangle", (40, 200, 60)),
    Archetype("needle_driver", "diamond", (30, 200, 210)),
    Archetype("probe", "fork", (50, 70, 230)),
    Archetype("suction", "cross", (200, 50, 210)),
    Archetype("clipper", "ring", (240, 130, 30), target_only=True),
    Archetype("stapler", "bar", (130, 230, 40), target_only=True),
    Archetype("retractor", "star", (140, 60, 230), target_only=True),
)
DEFAULT_INTERACTIONS = ("grasping", "cutting", "retracting", "suturing", "cauterizing", "holding")
DEFAULT_TISSUES = (
    Tissue("tissue", (205, 120, 120), 4),
    Tissue("kidney", (120, 60, 50), 7),
    Tissue("fat", (215, 190, 120), 3),
)


@dataclass(frozen=True)
class SceneSpec:
    instrument_classes: tuple[Archetype, ...] = DEFAULT_ARCHETYPES
    interactions: tuple[str, ...] = DEFAULT_INTERACTIONS
    tissue_types: tuple[Tissue, ...] = DEFAULT_TISSUES
    image_size: int = 64
    seed: int = 0
    n_shared_target: int = 2  # source classes that also appear in the target domain
    pixel_noise: float = 0.0  # std of additive noise in [0, 1] units, applied at render time
    occlusion: float = 0.0  # probability that the tip is hidden under a tissue-coloured blob

    def __post_init__(self):
        if len(self.instrument_classes) < 2:
            raise ValueError("need at least 2 instrument classes")
        if len(self.interactions) < 2:
            raise ValueError("need at least 2 interactions")
        names = [a.name for a in self.instrument_classes]
        if len(set(names)) != len(names):
            raise ValueError("instrument class names must be unique")
        if not self.tissue_types:
            raise ValueError("need at least one tissue type")

    @property
    def class_names(self) -> list[str]:
        return [a.name for a in self.instrument_classes]

    @property
    def source_classes(self) -> list[int]:
        return [i for i, a in enumerate(self.instrument_classes) if not a.target_only]

    @property
    def novel_classes(self) -> list[int]:
        return [i for i, a in enumerate(self.instrument_classes) if a.target_only]

    @property
    def target_classes(self) -> list[int]:
        return self.source_classes[: self.n_shared_target] + self.novel_classes

    def interaction_angle(self, interaction_id: int) -> float:
        return 360.0 * interaction_id / len(self.interactions)


@dataclass(frozen=True)
class DomainShift:
    hue_rotation: float = 0.0  # degrees, [-180, 180]
    background_swap: int = 0  # 0 = keep; k > 0 overlays stripe pattern k on the background
    noise_level: float = 0.0  # pixel noise std in [0, 1] units
    geometry_jitter: float = 0.0  # max relative zoom, [0, 0.5)
    seed: int = 0

    def __post_init__(self):
        if not -180.0 <= self.hue_rotation <= 180.0:
            raise ValueError("hue_rotation must lie in [-180, 180]")
        if not 0 <= self.background_swap <= 4:
            raise ValueError("background_swap must lie in 0..4")
        if not 0.0 <= self.noise_level <= 0.5:
            raise ValueError("noise_level must lie in [0, 0.5]")
        if not 0.0 <= self.geometry_jitter < 0.5:
            raise ValueError("geometry_jitter must lie in [0, 0.5)")

    @property
    def is_identity(self) -> bool:
        return (self.hue_rotation == 0 and self.background_swap == 0
                and self.noise_level == 0 and self.geometry_jitter == 0)


DEFAULT_TARGET_SHIFT = DomainShift(hue_rotation=30.0, background_swap=2, noise_level=0.03,
                                   geometry_jitter=0.1)


@dataclass
class SceneSample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    caption: list[str]
    object_classes: tuple[int, ...]
    domain: str = SOURCE
    split: str = TRAIN
    interaction: int = -1
    tissue: int = -1
    mask: np.ndarray | None = field(default=None, repr=False)  # instrument pixels
    tip_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split in TARGET_ONLY_SPLITS and self.domain != TARGET:
            raise ValueError(f"{self.split} samples must belong to the TARGET domain")

    @property
    def label(self) -> int:
        return self.object_classes[0]


def rng_stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def make_caption(spec: SceneSpec, class_id: int, interaction_id: int, tissue_id: int) -> list[str]:
    return [spec.class_names[class_id], "is", spec.interactions[interaction_id],
            spec.tissue_types[tissue_id].name]


def parse_caption(tokens: Sequence[str], spec: SceneSpec) -> tuple[int, int, int]:
    """Inverse of :func:`make_caption`; raises ``ValueError`` on anything off-grammar."""
    if len(tokens) != 4 or tokens[1] != "is":
        raise ValueError(f"caption does not follow the grammar: {' '.join(tokens)!r}")
    try:
        c = spec.class_names.index(tokens[0])
        i = spec.interactions.index(tokens[2])
        t = [x.name for x in spec.tissue_types].index(tokens[3])
    except ValueError:
        raise ValueError(f"unknown word in caption {' '.join(tokens)!r}") from None
    return c, i, t


# ---------------------------------------------------------------- rendering

def _value_noise(rng, size, grain):
    coarse = rng.random((grain, grain)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BICUBIC)
    fine = rng.random((grain * 2 + 1, grain * 2 + 1)).astype(np.float32)
    fine_img = Image.fromarray(fine, mode="F").resize((size, size), Image.BICUBIC)
    return np.clip(0.7 * np.asarray(img) + 0.3 * np.asarray(fine_img), 0.0, 1.0)


def _tip_polygon(shape: str, cx, cy, r, theta):
    """Unit-space outline rotated by ``theta`` (radians) and scaled to radius ``r``."""
    if shape == "square":
        pts = [(-0.8, -0.8), (0.8, -0.8), (0.8, 0.8), (-0.8, 0.8)]
    elif shape == "triangle":
        pts = [(1.1, 0.0), (-0.7, 0.95), (-0.7, -0.95)]
    elif shape == "diamond":
        pts = [(1.2, 0.0), (0.0, 0.65), (-1.2, 0.0), (0.0, -0.65)]
    elif shape == "fork":
        pts = [(-0.6, -1.0), (1.1, -1.0), (1.1, -0.45), (0.0, -0.45), (0.0, 0.45),
               (1.1, 0.45), (1.1, 1.0), (-0.6, 1.0)]
    elif shape == "cross":
        a, b = 0.33, 1.05
        pts = [(-a, -b), (a, -b), (a, -a), (b, -a), (b, a), (a, a), (a, b), (-a, b),
               (-a, a), (-b, a), (-b, -a), (-a, -a)]
    elif shape == "bar":
        pts = [(0.35, -1.1), (1.0, -1.1), (1.0, 1.1), (0.35, 1.1), (0.35, 0.3),
               (-0.9, 0.3), (-0.9, -0.3), (0.35, -0.3)]
    elif shape == "star":
        pts = []
        for k in range(10):
            rad = 1.15 if k % 2 == 0 else 0.5
            a = math.pi * k / 5
            pts.append((rad * math.cos(a), rad * math.sin(a)))
    else:
        raise ValueError(f"no polygon for tip shape {shape!r}")
    c, s = math.cos(theta), math.sin(theta)
    return [(cx + r * (x * c - y * s), cy + r * (x * s + y * c)) for x, y in pts]


def _draw_tip(draw, shape, cx, cy, r, theta, color):
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        ri = 0.45 * r
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
    else:
        draw.polygon(_tip_polygon(shape, cx, cy, r, theta), fill=color)


def generate_scene(spec: SceneSpec, class_id: int, interaction_id: int, rng_stream_id=0,
                   tissue_id: int | None = None, *, sample_id: str | None = None,
                   domain: str = SOURCE, split: str = TRAIN) -> SceneSample:
    """Render one scene; deterministic in ``(spec.seed, rng_stream_id)``.

    ``rng_stream_id`` may be an int or a tuple of ints.
    """
    n_cls = len(spec.instrument_classes)
    if not 0 <= class_id < n_cls:
        raise ValueError(f"class_id {class_id} out of range")
    if not 0 <= interaction_id < len(spec.interactions):
        raise ValueError(f"interaction_id {interaction_id} out of range")
    key = rng_stream_id if isinstance(rng_stream_id, tuple) else (rng_stream_id,)
    rng = rng_stream(spec.seed, *key)
    if tissue_id is None:
        tissue_id = int(rng.integers(len(spec.tissue_types)))
    elif not 0 <= tissue_id < len(spec.tissue_types):
        raise ValueError(f"tissue_id {tissue_id} out of range")

    S = spec.image_size
    u = S / 64.0
    tissue = spec.tissue_types[tissue_id]
    arche = spec.instrument_classes[class_id]

    tex = _value_noise(rng, S, tissue.grain)
    base = np.asarray(tissue.color, dtype=np.float32)
    bg = base[None, None, :] * (0.7 + 0.6 * tex[..., None])

    # pose
    cx = S / 2 + rng.uniform(-6, 6) * u
    cy = S / 2 + rng.uniform(-6, 6) * u
    angle = math.radians(spec.interaction_angle(interaction_id) + rng.uniform(-10, 10))
    scale = rng.uniform(0.85, 1.15)
    r = 7.0 * u * scale
    tip_rgb = tuple(int(np.clip(c + rng.integers(-arche.color_tol, arche.color_tol + 1), 0, 255))
                    for c in arche.color)
    shaft_rgb = int(rng.integers(150, 181))
    occluded = rng.random() < spec.occlusion

    # shaft runs from the tip outwards along the interaction direction
    far = 2 * S
    x1, y1 = cx + far * math.cos(angle), cy + far * math.sin(angle)
    shaft = Image.new("L", (S, S), 0)
    ImageDraw.Draw(shaft).line([(cx, cy), (x1, y1)], fill=255, width=max(2, round(4 * u)))
    tip = Image.new("L", (S, S), 0)
    # tip points away from the shaft
    _draw_tip(ImageDraw.Draw(tip), arche.tip, cx, cy, r, angle + math.pi, 255)

    shaft_m = np.asarray(shaft) > 0
    tip_m = np.asarray(tip) > 0
    img = bg.copy()
    img[shaft_m] = shaft_rgb
    img[tip_m] = np.asarray(tip_rgb, dtype=np.float32)
    if occluded:
        blob = Image.new("L", (S, S), 0)
        rb = 1.6 * r
        ImageDraw.Draw(blob).ellipse([cx - rb, cy - rb, cx + rb, cy + rb], fill=255)
        blob_m = np.asarray(blob) > 0
        img[blob_m] = base * 0.9
        tip_m = tip_m & ~blob_m
    if spec.pixel_noise > 0:
        img = img + rng.normal(0.0, spec.pixel_noise * 255.0, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    if sample_id is None:
        sample_id = "scene_" + "_".join(str(k) for k in key)
    return SceneSample(
        id=sample_id, image=image, caption=make_caption(spec, class_id, interaction_id, tissue_id),
        object_classes=(class_id,), domain=domain, split=split, interaction=interaction_id,
        tissue=tissue_id, mask=shaft_m | tip_m, tip_mask=tip_m)


# ------------------------------------------------------------- domain shift

def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the grey axis in RGB space
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def _stable_hash(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode("utf-8"))


def apply_domain_shift(sample: SceneSample, shift: DomainShift) -> SceneSample:
    """Pixel-space shift; the caption and labels are carried over unchanged."""
    if shift.is_identity:
        return replace(sample, image=sample.image.copy())
    rng = rng_stream(shift.seed, _stable_hash(sample.id))
    img = sample.image.astype(np.float64)
    H, W = img.shape[:2]
    mask = sample.mask if sample.mask is not None else np.zeros((H, W), dtype=bool)

    if shift.background_swap:
        k = shift.background_swap
        yy, xx = np.mgrid[0:H, 0:W]
        period = max(4, H // (2 + 2 * k))
        pattern = 0.5 + 0.5 * np.sin(2 * math.pi * (xx * (k % 2 + 1) + yy * k) / period)
        tint = np.asarray([(40, 0, 60), (0, 50, 40), (60, 40, 0), (30, 30, 30)][k - 1])
        overlay = img * (0.75 + 0.35 * pattern[..., None]) + tint * pattern[..., None]
        img = np.where(mask[..., None], img, overlay)
    if shift.hue_rotation:
        img = img @ _hue_matrix(shift.hue_rotation).T
    if shift.geometry_jitter:
        z = 1.0 + rng.uniform(0.0, shift.geometry_jitter)
        crop = int(round(H / z))
        off = (H - crop) // 2
        pil = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        img = np.asarray(pil.crop((off, off, off + crop, off + crop)).resize((W, H), Image.BILINEAR),
                         dtype=np.float64)
        mpil = Image.fromarray(mask.astype(np.uint8) * 255)
        mask = np.asarray(mpil.crop((off, off, off + crop, off + crop)).resize((W, H), Image.NEAREST)) > 0
    if shift.noise_level:
        img = img + rng.normal(0.0, shift.noise_level * 255.0, img.shape)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return replace(sample, image=out, mask=mask, tip_mask=None)


def channel_histogram_distance(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Mean over RGB channels of the L1 distance between normalized histograms."""
    d = 0.0
    for ch in range(3):
        ha, _ = np.histogram(a[..., ch], bins=bins, range=(0, 256))
        hb, _ = np.histogram(b[..., ch], bins=bins, range=(0, 256))
        d += np.abs(ha / ha.sum() - hb / hb.sum()).sum()
    return d / 3


# ------------------------------------------------------------------- splits

@dataclass
class DatasetManifest:
    spec: SceneSpec
    shift: DomainShift
    samples: list[SceneSample]

    def select(self, domain: str | None = None, split: str | None = None,
               classes: Sequence[int] | None = None) -> list[SceneSample]:
        out = []
        for s in self.samples:
            if domain is not None and s.domain != domain:
                continue
            if split is not None and s.split != split:
                continue
            if classes is not None and s.label not in classes:
                continue
            out.append(s)
        return out

    def by_id(self) -> dict[str, SceneSample]:
        return {s.id: s for s in self.samples}


DEFAULT_COUNTS = {"train": 200, "val": 20, "test": 40, "target_pool": 12, "target_test": 20}


def _make(spec, shift, domain, split, class_id, index):
    d_idx, s_idx = DOMAINS.index(domain), SPLITS.index(split)
    key = (d_idx, s_idx, class_id, index)
    rng = rng_stream(spec.seed, 7919, *key)
    interaction = int(rng.integers(len(spec.interactions)))
    sid = f"{domain[0].lower()}_{split.lower()}_{class_id:02d}_{index:05d}"
    sample = generate_scene(spec, class_id, interaction, key, sample_id=sid, domain=domain,
                            split=split)
    if domain == TARGET:
        sample = apply_domain_shift(sample, shift)
    return sample


def build_splits(spec: SceneSpec, shift: DomainShift = DEFAULT_TARGET_SHIFT,
                 counts: dict | None = None, k_shot: int = 5) -> DatasetManifest:
    """Source train/val/test over source classes plus a shifted target domain.

    ``counts`` gives per-class sizes: ``train``, ``val``, ``test`` (source),
    ``target_pool`` (target training images generated per class) and
    ``target_test``. ONE_SHOT takes one image per target class from the pool,
    FEW_SHOT takes the next ``k_shot``.
    """
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    if any(v <= 0 for v in counts.values()):
        raise ValueError("all split counts must be positive")
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    if 1 + k_shot > counts["target_pool"]:
        raise ValueError(f"k_shot={k_shot} exceeds the target pool of {counts['target_pool']} per class")

    samples = []
    for split, key in ((TRAIN, "train"), (VAL, "val"), (TEST, "test")):
        for c in spec.source_classes:
            samples += [_make(spec, shift, SOURCE, split, c, i) for i in range(counts[key])]
    for c in spec.target_classes:
        samples.append(_make(spec, shift, TARGET, ONE_SHOT, c, 0))
        samples += [_make(spec, shift, TARGET, FEW_SHOT, c, i) for i in range(1, 1 + k_shot)]
        samples += [_make(spec, shift, TARGET, TEST, c, i) for i in range(counts["target_test"])]
    return DatasetManifest(spec=spec, shift=shift, samples=samples)


# -------------------------------------------------------------- annotations

@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    caption: str
    class_ids: tuple[int, ...]
    domain: str
    split: str

    @property
    def id(self) -> str:
        return Path(self.image_path).stem


class AnnotationError(ValueError):
    pass


def write_annotations(path, records: Sequence[AnnotationRecord]) -> None:
    lines = []
    for r in records:
        fields = [r.image_path, r.caption, ",".join(str(c) for c in r.class_ids), r.domain, r.split]
        if any("\t" in f or "\n" in f for f in fields):
            raise AnnotationError(f"field contains a tab or newline in record {r}")
        lines.append("\t".join(fields) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_annotations(path) -> list[AnnotationRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise AnnotationError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
            path_, caption, ids, domain, split = parts
            try:
                class_ids = tuple(int(x) for x in ids.split(",")) if ids else ()
            except ValueError:
                raise AnnotationError(f"line {lineno}: field 'class_ids' is not a comma-separated int list") from None
            if domain not in DOMAINS:
                raise AnnotationError(f"line {lineno}: field 'domain' has unknown tag {domain!r}")
            if split not in SPLITS:
                raise AnnotationError(f"line {lineno}: field 'split' has unknown tag {split!r}")
            out.append(AnnotationRecord(path_, caption, class_ids, domain, split))
    return out


def to_records(samples: Sequence[SceneSample], image_dir: str = "images") -> list[AnnotationRecord]:
    return [AnnotationRecord(f"{image_dir}/{s.id}.png", " ".join(s.caption), tuple(s.object_classes),
                             s.domain, s.split) for s in samples]


def save_dataset(root, samples: Sequence[SceneSample], image_dir: str = "images") -> Path:
    """Write PNG images plus ``annotations.tsv`` under ``root``; returns the annotation path."""
    root = Path(root)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    records = to_records(samples, image_dir)
    for s, r in zip(samples, records):
        Image.fromarray(s.image).save(root / r.image_path, format="PNG")
    ann = root / "annotations.tsv"
    write_annotations(ann, records)
    return ann


def load_dataset(annotation_path) -> list[SceneSample]:
    annotation_path = Path(annotation_path)
    samples = []
    for r in read_annotations(annotation_path):
        image = np.asarray(Image.open(annotation_path.parent / r.image_path).convert("RGB"))
        samples.append(SceneSample(id=r.id, image=image, caption=r.caption.split(),
                                   object_classes=r.class_ids, domain=r.domain, split=r.split))
    return samples
