"""Shared test utilities: tiny model builders and scalar-loss graph helpers."""

import numpy as np

from nicap.model import ModelConfig, NicParams, init_params, parameter_shapes
from nicap.tensor import Rng, Tensor


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(
        vocab_size=11,
        feature_dim=6,
        embed_dim=8,
        hidden_dim=8,
        max_caption_len=6,
        dropout_rate=0.0,
        classifier_hidden=(5, 4),
        loss_weight=1.0,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def zero_params(config: ModelConfig) -> NicParams:
    return NicParams(config, {n: np.zeros(s) for n, s in parameter_shapes(config).items()})


def random_params(config: ModelConfig, seed: int) -> NicParams:
    return init_params(config, Rng(seed))


def scaled_params(config: ModelConfig, seed: int, scale: float) -> NicParams:
    """Uniform [-scale, scale] draws for every tensor (gradcheck conditioning)."""
    rng = Rng(seed)
    return NicParams(
        config,
        {n: rng.uniform(-scale, scale, s) for n, s in parameter_shapes(config).items()},
    )


def weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    """sum(t * weights) as a scalar graph node (for gradient tests)."""
    out = Tensor((t.data * weights).sum())
    out._parents = (t,)

    def backward():
        t._accumulate(weights * float(out.grad))

    out._backward = backward
    return out
