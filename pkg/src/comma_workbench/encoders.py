"""Miniature CLIP-style vision and text transformers with deep prompt slots.

Both encoders are pre-norm transformers (attention then GELU MLP, learned
positional embeddings added once at the input). Prompt rows for layer ``i`` are
placed in front of the token sequence entering that layer; at prompted layers
after the first, the previous layer's outputs at the prompt positions are
dropped and replaced by the fresh rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_side: int = 8
    channels: int = 3
    patch_size: int = 2
    width: int = 32
    layers: int = 6
    heads: int = 2
    joint_dim: int = 16

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ConfigError(f"image side {self.image_side} is not divisible by patch {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"vision width {self.width} is not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 64
    seq_len: int = 8
    width: int = 24
    layers: int = 6
    heads: int = 2
    joint_dim: int = 16

    def __post_init__(self):
        if self.seq_len < 1:
            raise ConfigError("text sequence length must be at least 1")
        if self.width % self.heads:
            raise ConfigError(f"text width {self.width} is not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    temperature: float = 0.07
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.vision.layers != self.text.layers:
            raise ConfigError("vision and text encoders must have the same depth")
        if self.vision.joint_dim != self.text.joint_dim:
            raise ConfigError("vision and text projections must share the joint width")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def layers(self) -> int:
        return self.vision.layers


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def _init_layer(rng, d, hidden):
    s_in, s_hid = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden)
    return {
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "wq": rng.normal(0, s_in, (d, d)), "bq": np.zeros(d),
        "wk": rng.normal(0, s_in, (d, d)), "bk": np.zeros(d),
        "wv": rng.normal(0, s_in, (d, d)), "bv": np.zeros(d),
        "wo": rng.normal(0, s_in, (d, d)), "bo": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
        "w1": rng.normal(0, s_in, (d, hidden)), "b1": np.zeros(hidden),
        "w2": rng.normal(0, s_hid, (hidden, d)), "b2": np.zeros(d),
    }


class Backbone:
    """All pretrained (later frozen) encoder parameters, addressed by name.

    Names are ``vision.*`` / ``text.*`` / ``logit``-free; the temperature lives on
    the config. Per-layer blocks are ``{branch}.layer{i}.{key}``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Backbone":
        rng = np.random.default_rng([seed, 0xB0])
        v, t = config.vision, config.text
        arrays = {
            "vision.patch_embed": rng.normal(0, 1.0 / np.sqrt(v.patch_dim), (v.patch_dim, v.width)),
            "vision.class_token": rng.normal(0, 0.5, v.width),
            "vision.pos_embed": rng.normal(0, 0.1, (1 + v.num_patches, v.width)),
            "vision.proj": rng.normal(0, 1.0 / np.sqrt(v.width), (v.width, v.joint_dim)),
            "text.token_embed": rng.normal(0, 1.0, (t.vocab_size, t.width)),
            "text.pos_embed": rng.normal(0, 0.1, (t.seq_len, t.width)),
            "text.proj": rng.normal(0, 1.0 / np.sqrt(t.width), (t.width, t.joint_dim)),
        }
        for i in range(v.layers):
            for k, a in _init_layer(rng, v.width, v.width * config.mlp_ratio).items():
                arrays[f"vision.layer{i}.{k}"] = a
        for i in range(t.layers):
            for k, a in _init_layer(rng, t.width, t.width * config.mlp_ratio).items():
                arrays[f"text.layer{i}.{k}"] = a
        return cls(config, {k: Tensor(a) for k, a in arrays.items()})

    def layer(self, branch: str, i: int) -> dict[str, Tensor]:
        return {k: self.params[f"{branch}.layer{i}.{k}"] for k in _LAYER_KEYS}

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def contains(self, t: Tensor) -> bool:
        return any(t is p for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: Tensor(p.data.copy()) for k, p in self.params.items()})


# --------------------------------------------------------------------------- building blocks


def patchify(image, patch_size: int) -> np.ndarray:
    """Split an H×W×C image into row-major patches, one flattened patch per row."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"image must be H×W×C, got shape {image.shape}")
    H, W, C = image.shape
    if H % patch_size or W % patch_size:
        raise DimensionError(f"image {H}×{W} is not divisible into {patch_size}×{patch_size} patches")
    gh, gw = H // patch_size, W // patch_size
    blocks = image.reshape(gh, patch_size, gw, patch_size, C).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch_size * patch_size * C)


def unpatchify(patches, image_side: int, patch_size: int, channels: int) -> np.ndarray:
    g = image_side // patch_size
    blocks = np.asarray(patches).reshape(g, g, patch_size, patch_size, channels)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(image_side, image_side, channels)


def transformer_layer(tokens: Tensor, params: dict[str, Tensor], heads: int) -> Tensor:
    """Pre-norm residual block: attention then a GELU MLP. Shape preserving."""
    d = params["ln1_g"].shape[0]
    if tokens.shape[-1] != d:
        raise DimensionError(f"tokens of width {tokens.shape[-1]} fed to a width-{d} layer")
    h = nx.layer_norm(tokens, params["ln1_g"], params["ln1_b"])
    tokens = nx.add(tokens, nx.multi_head_self_attention(h, params, heads))
    h = nx.layer_norm(tokens, params["ln2_g"], params["ln2_b"])
    h = nx.linear(nx.gelu(nx.linear(h, params["w1"], params["b1"])), params["w2"], params["b2"])
    return nx.add(tokens, h)


def insert_prompts(layer_index: int, tokens: Tensor, prompt_rows: Tensor | None, depth: int) -> Tensor:
    """Token sequence entering layer ``layer_index`` under prompt depth ``depth``.

    ``tokens`` is B×T×d. Below the depth the prompt rows are tiled over the batch
    and prepended; from layer 1 on they replace the first M_p rows, which are
    the previous layer's prompt outputs. At or beyond the depth the sequence is
    returned unchanged so prompt positions propagate like ordinary tokens.
    """
    if layer_index >= depth:
        return tokens
    if prompt_rows is None:
        raise DimensionError(f"layer {layer_index} is prompted but no prompt rows were given")
    if prompt_rows.ndim != 2 or prompt_rows.shape[1] != tokens.shape[-1]:
        raise DimensionError(f"prompt rows {prompt_rows.shape} do not match token width {tokens.shape[-1]}")
    m = prompt_rows.shape[0]
    body = tokens if layer_index == 0 else nx.slice_axis(tokens, m, tokens.shape[1], axis=1)
    return nx.concat([nx.repeat(prompt_rows, tokens.shape[0]), body], axis=1)


def _run_layers(backbone, branch, tokens, prompts, heads, keep_hidden):
    hidden = []
    depth = len(prompts)
    widths = {p.shape[0] for p in prompts}
    if len(widths) > 1:
        raise DimensionError(f"prompt lengths differ across layers: {sorted(widths)}")
    for i in range(backbone.config.layers):
        tokens = insert_prompts(i, tokens, prompts[i] if i < depth else None, depth)
        if keep_hidden:
            hidden.append(tokens)
        tokens = transformer_layer(tokens, backbone.layer(branch, i), heads)
    return tokens, hidden


def vision_tokens(backbone: Backbone, images) -> Tensor:
    """Class token + patch embeddings with positions added: B×(1+num_patches)×d_v."""
    v = backbone.config.vision
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (v.image_side, v.image_side, v.channels):
        raise DimensionError(f"images of shape {images.shape[1:]} do not match the vision config")
    B = images.shape[0]
    patches = np.stack([patchify(im, v.patch_size) for im in images])
    p = backbone.params
    embedded = nx.linear(Tensor(patches), p["vision.patch_embed"])
    cls = nx.repeat(nx.reshape(p["vision.class_token"], (1, v.width)), B)
    tokens = nx.concat([cls, embedded], axis=1)
    return nx.add(tokens, nx.repeat(p["vision.pos_embed"], B))


def text_tokens(backbone: Backbone, token_ids) -> Tensor:
    """Word embeddings with positions added: B×N×d_l."""
    t = backbone.config.text
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] != t.seq_len:
        raise DimensionError(f"token sequences must have length {t.seq_len}, got {ids.shape[1]}")
    p = backbone.params
    return nx.add(nx.embedding(p["text.token_embed"], ids), nx.repeat(p["text.pos_embed"], ids.shape[0]))


def encode_images(backbone: Backbone, images, prompts=(), return_hidden=False):
    """Project the final class-token state of each image into the joint space.

    ``prompts`` lists the vision prompt rows for layers 0..J-1. Returns a B×d_joint
    tensor, plus the per-layer input sequences when ``return_hidden``.
    """
    v = backbone.config.vision
    prompts = list(prompts)
    out, hidden = _run_layers(backbone, "vision", vision_tokens(backbone, images), prompts,
                              v.heads, return_hidden)
    m = prompts[0].shape[0] if prompts else 0
    x = nx.linear(nx.select(out, m, axis=1), backbone.params["vision.proj"])
    return (x, hidden) if return_hidden else x


def encode_texts(backbone: Backbone, token_ids, prompts=(), return_hidden=False):
    """Project the last-position output of each caption into the joint space."""
    t = backbone.config.text
    out, hidden = _run_layers(backbone, "text", text_tokens(backbone, token_ids), list(prompts),
                              t.heads, return_hidden)
    z = nx.linear(nx.select(out, -1, axis=1), backbone.params["text.proj"])
    return (z, hidden) if return_hidden else z


def encode_image(backbone: Backbone, image, prompts=()) -> Tensor:
    """Single-image form of :func:`encode_images`; returns a d_joint vector."""
    return nx.select(encode_images(backbone, np.asarray(image)[None], prompts), 0, axis=0)


def encode_text(backbone: Backbone, token_ids, prompts=()) -> Tensor:
    return nx.select(encode_texts(backbone, np.asarray(token_ids)[None], prompts), 0, axis=0)
