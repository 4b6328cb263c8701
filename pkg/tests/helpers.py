"""Shared miniature configurations for fast tests."""

from mmtlab.model import ModelConfig
from mmtlab.synthdata import SynthConfig
from mmtlab.tokenizer import SpectrogramGeometry, VideoGeometry

MICRO_AUDIO = SpectrogramGeometry(bins=8, frames=8, patch_bins=4, patch_frames=4)
MICRO_VIDEO = VideoGeometry(frames=2, height=8, width=8, patch_t=2, patch_h=4, patch_w=4)


def micro_synth_config(**overrides) -> SynthConfig:
    base = dict(
        audio=MICRO_AUDIO,
        video=MICRO_VIDEO,
        n_classes=(4, 3),
        gains={"audio": (3.0, 0.8), "video": (1.6, 3.2)},
    )
    base.update(overrides)
    return SynthConfig(**base)


def micro_model_config(**overrides) -> ModelConfig:
    base = dict(
        audio=MICRO_AUDIO,
        video=MICRO_VIDEO,
        embed_dim=16,
        layers=2,
        heads=2,
        mlp_ratio=2,
        fusion_layer=1,
        bottleneck=2,
        n_classes=(4, 3),
    )
    base.update(overrides)
    return ModelConfig(**base)
