"""Zero-shot scoring, prompt distillation and the frozen-backbone optimiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import Backbone, text_tokens, transformer_layer
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor


def cosine_logits(images: Tensor, texts: Tensor, temperature: float) -> Tensor:
    """B×C matrix of cos(x_b, z_c) / τ."""
    if images.ndim != 2 or texts.ndim != 2 or images.shape[1] != texts.shape[1]:
        raise DimensionError(f"cannot score embeddings {images.shape} against {texts.shape}")
    sims = nx.matmul(nx.l2_normalize(images), nx.transpose(nx.l2_normalize(texts)))
    return nx.scale(sims, 1.0 / temperature)


def class_scores(x: Tensor, class_embeddings: Tensor, temperature: float = 0.07) -> Tensor:
    """Class probabilities for one image embedding under a temperature softmax."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if x.ndim != 1:
        raise DimensionError(f"expected a single embedding vector, got {x.shape}")
    logits = cosine_logits(nx.reshape(x, (1, x.shape[0])), class_embeddings, temperature)
    return nx.select(nx.softmax(logits, axis=-1), 0, axis=0)


@dataclass
class ReferencePromptBank:
    """Mean-pooled hidden states of the hand-written template, one per layer.

    ``vectors[s]`` is taken from the sequence entering text layer ``s``.
    """

    vectors: list[np.ndarray]
    template_ids: tuple[int, ...]
    template_positions: tuple[int, ...]
    backbone_checksum: str

    def tensor(self, s: int) -> Tensor:
        return Tensor(self.vectors[s])


def capture_reference_prompts(backbone: Backbone, template_ids, template_positions=None) -> ReferencePromptBank:
    """Run the prompt-free text encoder on ``template_ids`` and pool, at each layer,
    the states at ``template_positions`` (default: every position)."""
    ids = np.asarray(template_ids)
    if ids.size == 0:
        raise ConfigError("empty template")
    positions = tuple(range(ids.size)) if template_positions is None else tuple(template_positions)
    if not positions:
        raise ConfigError("no template positions to pool")
    cfg = backbone.config.text
    vectors = []
    with nx.no_grad():
        tokens = text_tokens(backbone, ids[None])
        for i in range(backbone.config.layers):
            vectors.append(tokens.data[0, list(positions)].mean(axis=0))
            tokens = transformer_layer(tokens, backbone.layer("text", i), cfg.heads)
    return ReferencePromptBank(vectors, tuple(int(t) for t in ids), positions, backbone.checksum())


def kd_similarity(prompt_rows: Tensor, reference: Tensor) -> Tensor:
    """Cosine similarity between the mean prompt row and a reference vector."""
    if prompt_rows.ndim != 2 or prompt_rows.shape[1] != reference.shape[0]:
        raise DimensionError(f"prompt rows {prompt_rows.shape} vs reference {reference.shape}")
    return nx.cosine_sim(nx.mean(prompt_rows, axis=0), reference)


kd_loss = kd_similarity


def prompt_states(schedule_text: list[Tensor], hidden: list[Tensor], layer: int) -> Tensor:
    """Text prompt rows seen by ``layer``.

    At prompted layers these are the learnable rows themselves; past the prompt
    depth they are the propagated prompt-position states, averaged over the
    captions that were encoded.
    """
    if layer < len(schedule_text):
        return schedule_text[layer]
    if not schedule_text:
        raise ConfigError("no text prompts to distil")
    m = schedule_text[0].shape[0]
    return nx.mean(nx.slice_axis(hidden[layer], 0, m, axis=1), axis=0)


def distillation_terms(schedule_text, hidden, bank: ReferencePromptBank, kd_layers: int) -> list[Tensor]:
    """Similarities for the last ``kd_layers`` layers, shallowest first."""
    K = len(bank.vectors)
    return [kd_similarity(prompt_states(schedule_text, hidden, s), bank.tensor(s))
            for s in range(K - kd_layers, K)]


@dataclass
class LossBreakdown:
    ce: Tensor
    kd_per_layer: list[Tensor]
    total: Tensor
    kd_weight: float
    kd_layers: int

    @property
    def kd_penalty(self) -> float:
        return float(sum(1.0 - k.item() for k in self.kd_per_layer))


def total_loss(ce: Tensor, kd_terms, kd_weight: float, kd_layers: int) -> LossBreakdown:
    """``ce + λ Σ (1 - kd_s)`` over exactly ``kd_layers`` terms."""
    kd_terms = [k if isinstance(k, Tensor) else Tensor(k) for k in kd_terms]
    if len(kd_terms) != kd_layers:
        raise ContractError(f"expected {kd_layers} distillation terms, got {len(kd_terms)}")
    if ce.size != 1:
        raise ContractError("cross-entropy must be a scalar")
    total = ce
    if kd_terms and kd_weight != 0.0:
        one = Tensor(np.ones_like(kd_terms[0].data))
        penalty = nx.sub(one, kd_terms[0])
        for k in kd_terms[1:]:
            penalty = nx.add(penalty, nx.sub(one, k))
        total = nx.add(ce, nx.scale(penalty, kd_weight))
    return LossBreakdown(ce, kd_terms, total, kd_weight, kd_layers)


def sgd_step(learnables, lr: float, backbone: Backbone | None = None) -> None:
    """Plain SGD on ``learnables``; refuses to touch backbone tensors."""
    learnables = list(learnables)
    for p in learnables:
        if backbone is not None and backbone.contains(p):
            raise ContractError("attempted to update a frozen backbone parameter")
        if p.grad is None:
            raise ContractError(f"learnable of shape {p.shape} has no gradient")
    if lr == 0:
        return
    for p in learnables:
        p.data -= lr * p.grad


def zero_grads(learnables) -> None:
    for p in learnables:
        p.grad = None
