"""Pluggable vision backbones.

Every backbone turns a decoded RGB image into a fixed-width feature
vector, deterministically (inference mode, no augmentation). The
pretrained-CNN backbone needs its weights available locally or
downloadable; when they are not, construction fails with a clear message
instead of silently emitting different features.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

INPUT_SIZE = 299
FEATURE_DIM = 2048


class BackboneUnavailableError(RuntimeError):
    """The requested backbone cannot be constructed in this environment."""


def resize_rgb(image: Image.Image, size: int = INPUT_SIZE) -> np.ndarray:
    """Decode to RGB, bilinear-resize to size x size, scale to [0, 1]."""
    resized = image.convert("RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


class ProjectionBackbone:
    """Offline deterministic backbone: seeded Gaussian projection.

    The resized image is average-pooled to a small grid, scaled to
    [-1, 1], and mapped through a fixed random matrix. No pretrained
    weights involved: useful for tests, format plumbing, and pipelines
    where the real CNN is swapped in later.
    """

    name = "projection"
    GRID = 32

    def __init__(self, dim: int = FEATURE_DIM, seed: int = 0x5EED):
        self.dim = dim
        flat = self.GRID * self.GRID * 3
        rng = np.random.Generator(np.random.PCG64(seed))
        self._weights = rng.standard_normal((flat, dim)).astype(np.float32) / np.sqrt(flat)

    def __call__(self, image: Image.Image) -> np.ndarray:
        pixels = resize_rgb(image)
        # average-pool the 299x299 grid down to GRID x GRID
        edges = np.linspace(0, INPUT_SIZE, self.GRID + 1, dtype=int)
        pooled = np.empty((self.GRID, self.GRID, 3), dtype=np.float32)
        for i in range(self.GRID):
            for j in range(self.GRID):
                patch = pixels[edges[i] : edges[i + 1], edges[j] : edges[j + 1]]
                pooled[i, j] = patch.mean(axis=(0, 1))
        centered = pooled.reshape(-1) * 2.0 - 1.0
        return (centered @ self._weights).astype(np.float32)


class InceptionBackbone:
    """Penultimate layer of a pretrained inception-v3 classifier (2048-d).

    Weights come from torchvision: either its pretrained registry (needs
    network/cache) or a local state-dict file passed as ``weights_path``.
    """

    name = "inception-v3"

    def __init__(self, dim: int = FEATURE_DIM, weights_path: str | None = None):
        self.dim = dim
        try:
            import torch
            from torchvision.models import Inception_V3_Weights, inception_v3
        except ImportError as exc:
            raise BackboneUnavailableError(
                f"backbone 'inception-v3' unavailable: torchvision not installed ({exc})"
            ) from exc
        try:
            if weights_path:
                model = inception_v3(weights=None, init_weights=False)
                state = torch.load(weights_path, map_location="cpu", weights_only=True)
                model.load_state_dict(state)
            else:
                model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise BackboneUnavailableError(
                "backbone 'inception-v3' unavailable: could not load pretrained "
                f"weights ({exc}); pass --weights with a local state dict"
            ) from exc
        model.fc = torch.nn.Identity()
        model.aux_logits = False
        model.AuxLogits = None
        model.eval()
        self._model = model
        self._torch = torch

    def __call__(self, image: Image.Image) -> np.ndarray:
        torch = self._torch
        pixels = resize_rgb(image)
        # canonical imagenet normalization
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        tensor = torch.from_numpy(((pixels - mean) / std).transpose(2, 0, 1)).unsqueeze(0)
        with torch.no_grad():
            features = self._model(tensor)
        return features.squeeze(0).numpy().astype(np.float32)


_REGISTRY = {
    ProjectionBackbone.name: ProjectionBackbone,
    InceptionBackbone.name: InceptionBackbone,
}

DEFAULT_BACKBONE = InceptionBackbone.name


def make_backbone(identifier: str, weights_path: str | None = None):
    """Instantiate a backbone by identifier (clear error when unknown)."""
    try:
        factory = _REGISTRY[identifier]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise BackboneUnavailableError(
            f"unknown backbone {identifier!r} (available: {known})"
        ) from None
    if identifier == InceptionBackbone.name:
        return factory(weights_path=weights_path)
    return factory()
