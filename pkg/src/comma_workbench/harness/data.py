"""Synthetic image/caption datasets drawn from a shared concept world.

Every vocabulary id from ``FIRST_CONCEPT`` upward names a concept with a fixed
image prototype (the "world"). The backbone is pretrained on that world, so it
carries generic knowledge about every concept. A dataset picks ``C`` concepts,
perturbs their prototypes with a dataset-wide style offset and a per-class
deviation, and renders noisy examples plus template captions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..encoders import ModelConfig
from ..errors import ConfigError, DataError, RecordParseError

PAD, SOT, EOT = 0, 1, 2
TEMPLATE_WORDS = (3, 4, 5, 3)  # "a photo of a"
PERIOD = 6
CATEGORY = 7  # placeholder filling the class slot of the bare template
FIRST_CONCEPT = 8


def concept_tokens(vocab_size: int) -> np.ndarray:
    return np.arange(FIRST_CONCEPT, vocab_size)


def caption(class_token: int, template_length: int, seq_len: int) -> list[int]:
    """``SOT, template words, class, '.', PAD..., EOT`` padded to ``seq_len``."""
    if not 1 <= template_length <= len(TEMPLATE_WORDS):
        raise ConfigError(f"template length must lie in 1..{len(TEMPLATE_WORDS)}")
    body = [SOT, *TEMPLATE_WORDS[:template_length], int(class_token), PERIOD]
    if len(body) + 1 > seq_len:
        raise ConfigError(f"a {template_length}-word template does not fit in {seq_len} tokens")
    return body + [PAD] * (seq_len - len(body) - 1) + [EOT]


def template_positions(template_length: int) -> tuple[int, ...]:
    return tuple(range(1, 1 + template_length))


def world_prototypes(world_seed: int, model: ModelConfig) -> np.ndarray:
    """One H×W×C prototype per vocabulary id (only concept ids are meaningful)."""
    v = model.vision
    rng = np.random.default_rng([world_seed, 0x3D])
    return rng.normal(0.0, 1.0, (model.text.vocab_size, v.image_side, v.image_side, v.channels))


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    train_per_class: int = 16
    test_per_class: int = 20
    prototype_scale: float = 0.5
    style_scale: float = 0.5
    pixel_noise: float = 0.5
    template_length: int = 4
    class_tokens: tuple[int, ...] | None = None
    seed: int = 0
    world_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.train_per_class < 16:
            raise ConfigError("training pools need at least 16 examples per class")
        if self.test_per_class < 1:
            raise ConfigError("test pools need at least one example per class")
        for name in ("prototype_scale", "style_scale", "pixel_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.class_tokens is not None:
            toks = tuple(int(t) for t in self.class_tokens)
            object.__setattr__(self, "class_tokens", toks)
            if len(toks) != self.num_classes or len(set(toks)) != len(toks):
                raise ConfigError("class_tokens must list one distinct token per class")


@dataclass
class Example:
    image: np.ndarray
    tokens: np.ndarray
    label: int
    uid: int


@dataclass
class Dataset:
    spec: DatasetSpec
    class_tokens: tuple[int, ...]
    train: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    vocab_size: int = 0
    seq_len: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_tokens)

    def class_captions(self, classes=None) -> np.ndarray:
        classes = range(self.num_classes) if classes is None else classes
        return np.array([caption(self.class_tokens[c], self.spec.template_length, self.seq_len) for c in classes])

    def template(self) -> list[int]:
        return caption(CATEGORY, self.spec.template_length, self.seq_len)


def gen_synth_dataset(spec: DatasetSpec, model: ModelConfig | None = None) -> Dataset:
    """Deterministic dataset for ``spec``: train pool then test pool per class."""
    model = model or ModelConfig()
    concepts = concept_tokens(model.text.vocab_size)
    rng = np.random.default_rng([spec.seed, 0xDA])
    if spec.class_tokens is None:
        if spec.num_classes > concepts.size:
            raise ConfigError(f"only {concepts.size} concepts exist, asked for {spec.num_classes}")
        tokens = tuple(int(t) for t in rng.choice(concepts, spec.num_classes, replace=False))
    else:
        tokens = spec.class_tokens
        if min(tokens) < FIRST_CONCEPT or max(tokens) >= model.text.vocab_size:
            raise ConfigError(f"class tokens must be concept ids in {FIRST_CONCEPT}..{model.text.vocab_size - 1}")
    world = world_prototypes(spec.world_seed, model)
    shape = world.shape[1:]
    style = rng.normal(0.0, 1.0, shape)
    protos = [world[t] + spec.style_scale * style + spec.prototype_scale * rng.normal(0.0, 1.0, shape)
              for t in tokens]
    ds = Dataset(spec, tokens, vocab_size=model.text.vocab_size, seq_len=model.text.seq_len)
    uid = 0
    for pool, count in ((ds.train, spec.train_per_class), (ds.test, spec.test_per_class)):
        for c, proto in enumerate(protos):
            cap = np.array(caption(tokens[c], spec.template_length, model.text.seq_len))
            for _ in range(count):
                img = proto + spec.pixel_noise * rng.normal(0.0, 1.0, shape)
                pool.append(Example(img, cap.copy(), c, uid))
                uid += 1
    return ds


@dataclass(frozen=True)
class SplitPlan:
    base: tuple[int, ...]
    novel: tuple[int, ...]


def split_base_novel(class_ids) -> SplitPlan:
    """Lowest ceil(C/2) class ids are base, the rest novel."""
    ids = sorted(int(c) for c in class_ids)
    if len(ids) < 2:
        raise ConfigError("base/novel split needs at least 2 classes")
    cut = math.ceil(len(ids) / 2)
    return SplitPlan(tuple(ids[:cut]), tuple(ids[cut:]))


def sample_few_shot(examples, classes, k: int, seed: int) -> list[Example]:
    """Exactly ``k`` examples of each class in ``classes``, without replacement."""
    rng = np.random.default_rng([seed, 0xF5])
    out = []
    for c in sorted(classes):
        pool = [e for e in examples if e.label == c]
        if len(pool) < k:
            raise DataError(f"class {c} has {len(pool)} examples, {k} requested")
        picks = rng.choice(len(pool), size=k, replace=False)
        out.extend(pool[i] for i in picks)
    return out


# --------------------------------------------------------------------------- dataset files


def write_examples(examples, path) -> None:
    """One JSON object per line: class id, token ids, row-major flat image."""
    with open(path, "w") as fh:
        for e in examples:
            fh.write(json.dumps({"class_id": int(e.label), "tokens": [int(t) for t in e.tokens],
                                 "image": [float(x) for x in np.asarray(e.image).reshape(-1)]}) + "\n")


def read_examples(path, image_shape) -> list[Example]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                image = np.array(row["image"], dtype=np.float64).reshape(image_shape)
                ex = Example(image, np.array(row["tokens"], dtype=np.int64), int(row["class_id"]), lineno - 1)
            except (ValueError, KeyError, TypeError) as err:
                raise RecordParseError(str(err), path=path, line=lineno) from None
            out.append(ex)
    return out
