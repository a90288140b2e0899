"""Class-incremental domain-adaptive feature extraction and meshed captioning on synthetic surgical scenes."""
from .backbone import BackboneConfig, FeatureExtractor
from .captioner import CaptionerConfig, MeshedCaptioner, Vocab, beam_search, build_vocab
from .cida import CIDAConfig, ExemplarMemory, IncrementPlan, Mode
from .smoothing import SigmaSchedule, gaussian_kernel
from .synthdata import DomainShift, SceneSpec, build_splits

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "FeatureExtractor", "CaptionerConfig", "MeshedCaptioner", "Vocab",
    "beam_search", "build_vocab", "CIDAConfig", "ExemplarMemory", "IncrementPlan", "Mode",
    "SigmaSchedule", "gaussian_kernel", "DomainShift", "SceneSpec", "build_splits",
]
