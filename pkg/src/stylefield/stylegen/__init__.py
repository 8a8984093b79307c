from stylefield.stylegen.generator import (
    GeneratorConfig,
    HiddenFeatureMap,
    LatentCode,
    MappingNetwork,
    ToyGenerator,
    generate_geo,
    generate_style,
    map_latent,
    style_mix,
)
from stylefield.stylegen.encoder import InversionEncoder, invert
from stylefield.stylegen.train import (
    Discriminator,
    TrainEncoderConfig,
    TrainGanConfig,
    PivotalConfig,
    finetune_generator,
    train_encoder,
    train_generator,
)

__all__ = [
    "Discriminator",
    "GeneratorConfig",
    "HiddenFeatureMap",
    "InversionEncoder",
    "LatentCode",
    "MappingNetwork",
    "PivotalConfig",
    "ToyGenerator",
    "TrainEncoderConfig",
    "TrainGanConfig",
    "finetune_generator",
    "generate_geo",
    "generate_style",
    "invert",
    "map_latent",
    "style_mix",
    "train_encoder",
    "train_generator",
]
