"""Image-to-latent inversion: convolutional encoder plus a residual
refinement head whose output layer starts at zero, so refinement is the
identity at initialization."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.errors import ValidationError
from stylefield.stylegen.generator import GeneratorConfig, LatentCode, ToyGenerator


class InversionEncoder(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        chans = (24, 48, 64, 96)
        convs = []
        prev = 3
        for c in chans:
            convs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)
        feat_res = cfg.resolution // 2 ** len(chans)
        self.fc1 = nn.Linear(chans[-1] * feat_res * feat_res, 128)
        self.fc2 = nn.Linear(128, cfg.latent_dim)
        self.refine_hidden = nn.Linear(cfg.latent_dim, 64)
        self.refine_out = nn.Linear(64, cfg.latent_dim)
        nn.init.zeros_(self.refine_out.weight)
        nn.init.zeros_(self.refine_out.bias)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Penultimate 128-d features; the identity-distance proxy space."""
        x = images
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return F.leaky_relu(self.fc1(x.flatten(1)), 0.2)

    def base_code(self, images: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        w = self.base_code(images)
        return w + self.refine_out(F.leaky_relu(self.refine_hidden(w), 0.2))

    def zero_refinement(self) -> None:
        nn.init.zeros_(self.refine_out.weight)
        nn.init.zeros_(self.refine_out.bias)


def to_generator_tensor(image) -> torch.Tensor:
    """Accept (H, W, 3) arrays in [0, 1] or (3, H, W) tensors."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValidationError("expected an (H, W, 3) image array")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    if isinstance(image, torch.Tensor):
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValidationError("expected a (3, H, W) image tensor")
        return image.float()
    raise ValidationError(f"unsupported image type {type(image)!r}")


def invert(gen: ToyGenerator, encoder: InversionEncoder, image) -> LatentCode:
    """Map an image at generator resolution back to a latent code."""
    img = to_generator_tensor(image)
    res = gen.config.resolution
    if img.shape[1] != res or img.shape[2] != res:
        raise ValidationError(f"image {tuple(img.shape[1:])} != generator resolution {res}")
    with torch.no_grad():
        w = encoder(img[None])[0]
    return gen.broadcast(w)
