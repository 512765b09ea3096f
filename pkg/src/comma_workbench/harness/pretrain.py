"""Contrastive pretraining of the miniature backbone on the concept world.

This stands in for a downloaded CLIP checkpoint: after pretraining, every
concept's template caption is matched to its images, which is the generic
knowledge that prompt tuning can erode and distillation tries to keep.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..encoders import Backbone, ModelConfig, encode_images, encode_texts
from ..objectives import cosine_logits
from .data import caption, concept_tokens, world_prototypes


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = 0
    world_seed: int = 0
    steps: int = 300
    batch_size: int = 24
    lr: float = 3e-3
    pixel_noise: float = 0.5
    template_length: int = 4


def _adam(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    t = 0

    def step():
        nonlocal t
        t += 1
        for p, mi, vi in zip(params, m, v):
            g = p.grad
            mi *= beta1
            mi += (1 - beta1) * g
            vi *= beta2
            vi += (1 - beta2) * g * g
            p.data -= lr * (mi / (1 - beta1 ** t)) / (np.sqrt(vi / (1 - beta2 ** t)) + eps)
            p.grad = None

    return step


def pretrain(model: ModelConfig, cfg: PretrainConfig, log=None) -> Backbone:
    """Symmetric image/caption contrastive training with Adam; returns a frozen backbone."""
    backbone = Backbone.initialize(model, cfg.seed)
    if cfg.steps == 0:
        return backbone
    backbone.set_trainable(True)
    params = backbone.tensors()
    step = _adam(params, cfg.lr)
    world = world_prototypes(cfg.world_seed, model)
    concepts = concept_tokens(model.text.vocab_size)
    rng = np.random.default_rng([cfg.seed, cfg.world_seed, 0x9E])
    batch = min(cfg.batch_size, concepts.size)
    labels = np.arange(batch)
    for i in range(cfg.steps):
        picks = rng.choice(concepts, batch, replace=False)
        images = world[picks] + cfg.pixel_noise * rng.normal(0.0, 1.0, (batch,) + world.shape[1:])
        captions = np.array([caption(t, cfg.template_length, model.text.seq_len) for t in picks])
        logits = cosine_logits(encode_images(backbone, images), encode_texts(backbone, captions),
                               model.temperature)
        loss = nx.scale(nx.add(nx.cross_entropy(logits, labels),
                               nx.cross_entropy(nx.transpose(logits), labels)), 0.5)
        nx.backward(loss, leaves=params)
        step()
        if log is not None and (i % 50 == 0 or i == cfg.steps - 1):
            log(i, loss.item())
    backbone.set_trainable(False)
    return backbone


@functools.lru_cache(maxsize=8)
def _cached(model: ModelConfig, cfg: PretrainConfig) -> Backbone:
    return pretrain(model, cfg)


def pretrained_backbone(model: ModelConfig, cfg: PretrainConfig) -> Backbone:
    """Deterministic pretrained backbone; memoised per process, returned as a private copy."""
    return _cached(model, cfg).copy()
