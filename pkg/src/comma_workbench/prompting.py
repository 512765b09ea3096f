"""Learnable prompt parameters and the strategies that couple the two branches."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor

PROMPT_INIT_STD = 0.02


class Coupling(str, enum.Enum):
    NONE = "none"
    COOP_TEXT = "coop_text"
    DEEP_INDEPENDENT = "deep_independent"
    MAPLE_UNI = "maple_uni"
    COMMA = "comma"


@dataclass(frozen=True)
class PromptStrategy:
    """Which prompts exist and how they are coupled, plus the distillation knobs.

    ``kd_layers`` of 0 with ``kd_enabled`` is allowed and contributes no terms.
    ``scale_mode`` picks the attention divisor for correlated generation:
    ``"width"`` uses sqrt(d_v), ``"length"`` uses sqrt(M_p).
    """

    coupling: Coupling = Coupling.COMMA
    kd_enabled: bool = True
    kd_weight: float = 1.0
    kd_layers: int = 2
    scale_mode: str = "width"

    def __post_init__(self):
        object.__setattr__(self, "coupling", Coupling(self.coupling))
        if self.kd_weight < 0:
            raise ConfigError(f"distillation weight must be >= 0, got {self.kd_weight}")
        if self.kd_layers < 0:
            raise ConfigError(f"distillation layer count must be >= 0, got {self.kd_layers}")
        if self.scale_mode not in ("width", "length"):
            raise ConfigError(f"unknown scale mode {self.scale_mode!r}")
        if self.kd_enabled and self.coupling is Coupling.NONE:
            raise ConfigError("distillation needs learnable text prompts")

    def validate(self, layers: int):
        if self.kd_enabled and self.kd_layers > layers:
            raise ConfigError(f"cannot distil over {self.kd_layers} layers of a {layers}-layer encoder")


@dataclass
class PromptSet:
    """Learnable prompt tensors for one strategy.

    ``vision_prompts`` holds one matrix per prompted layer for DEEP_INDEPENDENT
    and the single layer-0 seed for COMMA. ``key_proj``/``value_proj`` exist only
    for COMMA and ``maple_maps`` (weight, bias pairs) only for MAPLE_UNI.
    """

    coupling: Coupling
    text_prompts: list[Tensor] = field(default_factory=list)
    vision_prompts: list[Tensor] = field(default_factory=list)
    key_proj: Tensor | None = None
    value_proj: Tensor | None = None
    maple_maps: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"text.{i}", t) for i, t in enumerate(self.text_prompts)]
        out += [(f"vision.{i}", t) for i, t in enumerate(self.vision_prompts)]
        if self.key_proj is not None:
            out += [("key_proj", self.key_proj), ("value_proj", self.value_proj)]
        for i, (w, b) in enumerate(self.maple_maps):
            out += [(f"maple.{i}.weight", w), (f"maple.{i}.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def depth(self) -> int:
        return len(self.text_prompts)

    @property
    def length(self) -> int:
        return self.text_prompts[0].shape[0] if self.text_prompts else 0

    def state(self) -> dict[str, list]:
        return {name: t.data.tolist() for name, t in self.named_parameters()}

    @classmethod
    def from_state(cls, coupling, state: dict) -> "PromptSet":
        coupling = Coupling(coupling)

        def grab(prefix):
            keys = sorted((k for k in state if k.startswith(prefix) and k.count(".") == 1),
                          key=lambda k: int(k.split(".")[1]))
            return [Tensor(state[k], requires_grad=True) for k in keys]

        ps = cls(coupling, text_prompts=grab("text."), vision_prompts=grab("vision."))
        if "key_proj" in state:
            ps.key_proj = Tensor(state["key_proj"], requires_grad=True)
            ps.value_proj = Tensor(state["value_proj"], requires_grad=True)
        n_maps = len({k.split(".")[1] for k in state if k.startswith("maple.")})
        ps.maple_maps = [(Tensor(state[f"maple.{i}.weight"], requires_grad=True),
                          Tensor(state[f"maple.{i}.bias"], requires_grad=True)) for i in range(n_maps)]
        return ps


def init_text_prompts(template_ids, token_embed, depth: int, length: int, seed: int) -> list[Tensor]:
    """Layer 0 copies the embeddings of the first ``length`` template tokens;
    deeper layers are drawn from Normal(0, 0.02²)."""
    template_ids = list(template_ids)
    if length < 1:
        raise ConfigError("prompt length must be at least 1")
    if len(template_ids) < length:
        raise ConfigError(f"template of {len(template_ids)} tokens cannot initialise {length} prompt rows")
    table = token_embed.data if isinstance(token_embed, Tensor) else np.asarray(token_embed)
    if depth == 0:
        return []
    rng = np.random.default_rng([seed, 0x7E])
    prompts = [Tensor(table[template_ids[:length]].copy(), requires_grad=True)]
    for _ in range(1, depth):
        prompts.append(Tensor(rng.normal(0.0, PROMPT_INIT_STD, (length, table.shape[1])), requires_grad=True))
    return prompts


def init_prompt_set(strategy: PromptStrategy, backbone, template_ids, depth: int, length: int,
                    seed: int) -> PromptSet:
    """Fresh learnables for ``strategy`` on ``backbone``'s widths.

    Cross-branch maps start at the prompt scale too, so generated vision
    prompts begin as small as independently learned ones.
    """
    cfg = backbone.config
    K, d_l, d_v = cfg.layers, cfg.text.width, cfg.vision.width
    c = strategy.coupling
    if c is Coupling.NONE:
        return PromptSet(c)
    if c is Coupling.COOP_TEXT:
        depth = 1
    if not 1 <= depth <= K:
        raise ConfigError(f"prompt depth {depth} must lie in 1..{K}")
    text = init_text_prompts(template_ids, backbone.params["text.token_embed"], depth, length, seed)
    rng = np.random.default_rng([seed, 0x71])

    def learnable(*shape, std=PROMPT_INIT_STD):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    ps = PromptSet(c, text_prompts=text)
    if c is Coupling.DEEP_INDEPENDENT:
        ps.vision_prompts = [learnable(length, d_v) for _ in range(depth)]
    elif c is Coupling.MAPLE_UNI:
        ps.maple_maps = [(learnable(d_l, d_v),
                          Tensor(np.zeros(d_v), requires_grad=True)) for _ in range(depth)]
    elif c is Coupling.COMMA:
        ps.vision_prompts = [learnable(length, d_v)]
        ps.key_proj = learnable(d_l, d_v)
        ps.value_proj = learnable(d_l, d_v)
    return ps


def correlated_prompts(vision_prev: Tensor, text_prev: Tensor, key_proj: Tensor, value_proj: Tensor,
                       scale_mode: str = "width") -> Tensor:
    """Next-layer vision prompts: previous vision prompts attend over the
    previous text prompts (projected to the vision width) token by token."""
    m, d_v = vision_prev.shape
    if text_prev.ndim != 2 or text_prev.shape[0] != m:
        raise DimensionError(f"vision prompts {vision_prev.shape} and text prompts {text_prev.shape} differ in length")
    if key_proj.shape != (text_prev.shape[1], d_v) or value_proj.shape != key_proj.shape:
        raise DimensionError(f"projections {key_proj.shape}/{value_proj.shape} do not map "
                             f"width {text_prev.shape[1]} to {d_v}")
    divisor = math.sqrt(d_v) if scale_mode == "width" else math.sqrt(m)
    keys = nx.matmul(text_prev, key_proj)
    values = nx.matmul(text_prev, value_proj)
    return nx.scaled_dot_product_attention(vision_prev, keys, values, scale_by=divisor)


def maple_prompts(text_rows: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map from text width to vision width."""
    if text_rows.ndim != 2 or text_rows.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"cannot map prompts {text_rows.shape} with weight {weight.shape}, bias {bias.shape}")
    return nx.linear(text_rows, weight, bias)


@dataclass
class PromptSchedule:
    vision: list[Tensor] = field(default_factory=list)
    text: list[Tensor] = field(default_factory=list)


def build_prompt_schedule(strategy: PromptStrategy, prompt_set: PromptSet) -> PromptSchedule:
    """Per-layer prompt rows for both encoders."""
    c = strategy.coupling
    if prompt_set.coupling is not c:
        raise ConfigError(f"prompt set was built for {prompt_set.coupling.value}, strategy is {c.value}")
    text = list(prompt_set.text_prompts)
    if c is Coupling.NONE:
        if text or prompt_set.vision_prompts:
            raise ConfigError("NONE strategy takes no prompts")
        return PromptSchedule()
    if not text:
        raise ConfigError(f"{c.value} needs text prompts")
    if c is Coupling.COOP_TEXT:
        if len(text) != 1 or prompt_set.vision_prompts:
            raise ConfigError("COOP_TEXT uses exactly one layer of text prompts and no vision prompts")
        return PromptSchedule(text=text)
    if c is Coupling.DEEP_INDEPENDENT:
        if len(prompt_set.vision_prompts) != len(text):
            raise ConfigError("DEEP_INDEPENDENT needs one vision prompt per text prompt layer")
        return PromptSchedule(vision=list(prompt_set.vision_prompts), text=text)
    if c is Coupling.MAPLE_UNI:
        if len(prompt_set.maple_maps) != len(text):
            raise ConfigError("MAPLE_UNI needs one map per prompted layer")
        return PromptSchedule(vision=[maple_prompts(t, w, b) for t, (w, b) in zip(text, prompt_set.maple_maps)],
                              text=text)
    if len(prompt_set.vision_prompts) != 1 or prompt_set.key_proj is None:
        raise ConfigError("COMMA needs one vision seed prompt and key/value projections")
    vision = [prompt_set.vision_prompts[0]]
    for i in range(1, len(text)):
        vision.append(correlated_prompts(vision[i - 1], text[i - 1], prompt_set.key_proj,
                                         prompt_set.value_proj, strategy.scale_mode))
    return PromptSchedule(vision=vision, text=text)


def expected_parameter_count(coupling, depth: int, length: int, d_l: int, d_v: int) -> int:
    c = Coupling(coupling)
    return {
        Coupling.NONE: 0,
        Coupling.COOP_TEXT: length * d_l,
        Coupling.DEEP_INDEPENDENT: depth * length * (d_l + d_v),
        Coupling.MAPLE_UNI: depth * length * d_l + depth * (d_l * d_v + d_v),
        Coupling.COMMA: depth * length * d_l + length * d_v + 2 * d_l * d_v,
    }[c]
