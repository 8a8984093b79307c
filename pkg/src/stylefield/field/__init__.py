from stylefield.field.encoding import DirectionalEncoding, HashGridConfig, HashGridEncoding
from stylefield.field.network import ConditionedField, FieldConfig
from stylefield.field.render import RenderOutput, composite, render_image, render_rays
from stylefield.field.train import train_original

__all__ = [
    "ConditionedField",
    "DirectionalEncoding",
    "FieldConfig",
    "HashGridConfig",
    "HashGridEncoding",
    "RenderOutput",
    "composite",
    "render_image",
    "render_rays",
    "train_original",
]
