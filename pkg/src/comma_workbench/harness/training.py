"""Prompt fine-tuning runs and the three evaluation protocols."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..encoders import Backbone, ModelConfig, encode_images, encode_texts
from ..errors import ConfigError, DataError, NumericalError
from ..objectives import (
    capture_reference_prompts, cosine_logits, distillation_terms, kd_similarity, prompt_states,
    sgd_step, total_loss, zero_grads,
)
from ..prompting import Coupling, PromptSet, PromptStrategy, build_prompt_schedule, init_prompt_set
from .data import PAD, Dataset, DatasetSpec, gen_synth_dataset, sample_few_shot, split_base_novel, \
    template_positions, TEMPLATE_WORDS
from .pretrain import PretrainConfig, pretrained_backbone
from .records import RunRecord, harmonic_mean


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one run. Field names double as config-file keys."""

    strategy: str = "comma"
    kd: bool = True
    kd_weight: float = 1.0
    kd_layers: int = 2
    prompt_depth: int = 9
    prompt_length: int = 2
    scale_mode: str = "width"
    epochs: int = 5
    batch_size: int = 4
    lr: float = 0.0035
    shots: int = 16
    seed: int = 0
    # dataset
    num_classes: int = 10
    train_per_class: int = 16
    test_per_class: int = 20
    prototype_scale: float = 0.5
    style_scale: float = 0.5
    pixel_noise: float = 0.5
    template_length: int = 4
    dataset_seed: int = 0
    world_seed: int = 0
    # backbone pretraining
    backbone_seed: int = 0
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3

    def __post_init__(self):
        Coupling(self.strategy)
        if self.epochs < 0 or self.batch_size < 1 or self.shots < 1 or self.lr < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, shots >= 1 and lr >= 0 are required")
        if self.prompt_depth < 0 or self.prompt_length < 1:
            raise ConfigError("prompt depth must be >= 0 and prompt length >= 1")
        self.prompt_strategy().validate(ModelConfig().layers)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys are rejected."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {}
        for key, raw in values.items():
            kind = type(getattr(cls(), key)) if key != "kd" else bool
            typed[key] = _coerce(key, raw, kind)
        return cls(**typed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def model_config(self) -> ModelConfig:
        return ModelConfig()

    def effective_depth(self) -> int:
        c = Coupling(self.strategy)
        if c is Coupling.NONE:
            return 0
        if c is Coupling.COOP_TEXT:
            return 1
        return min(self.prompt_depth, self.model_config().layers)

    def prompt_strategy(self) -> PromptStrategy:
        c = Coupling(self.strategy)
        return PromptStrategy(c, kd_enabled=self.kd and c is not Coupling.NONE,
                              kd_weight=self.kd_weight, kd_layers=self.kd_layers, scale_mode=self.scale_mode)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(num_classes=self.num_classes, train_per_class=self.train_per_class,
                           test_per_class=self.test_per_class, prototype_scale=self.prototype_scale,
                           style_scale=self.style_scale, pixel_noise=self.pixel_noise,
                           template_length=self.template_length, seed=self.dataset_seed,
                           world_seed=self.world_seed)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(seed=self.backbone_seed, world_seed=self.world_seed,
                              steps=self.pretrain_steps, lr=self.pretrain_lr)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"cannot read {key} = {raw!r} as {kind.__name__}") from None


@dataclass
class TrainedModel:
    config: TrainConfig
    backbone: Backbone
    prompt_set: PromptSet
    strategy: PromptStrategy
    dataset: Dataset

    def schedule(self):
        return build_prompt_schedule(self.strategy, self.prompt_set)

    def class_embeddings(self, captions) -> np.ndarray:
        with nx.no_grad():
            return encode_texts(self.backbone, captions, self.schedule().text).data

    def image_embeddings(self, images) -> np.ndarray:
        with nx.no_grad():
            return encode_images(self.backbone, images, self.schedule().vision).data

    def predict(self, images, captions) -> np.ndarray:
        """Index of the best-matching caption for each image."""
        x = self.image_embeddings(images)
        z = self.class_embeddings(captions)
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        z = z / np.linalg.norm(z, axis=1, keepdims=True)
        return np.argmax(x @ z.T, axis=1)


def accuracy(model: TrainedModel, examples, classes, dataset: Dataset | None = None, captions=None) -> float:
    """Top-1 accuracy (percent) of ``examples`` whose label is in ``classes``,
    choosing only among ``classes``."""
    dataset = dataset or model.dataset
    classes = list(classes)
    chosen = [e for e in examples if e.label in set(classes)]
    if not chosen:
        raise DataError(f"no examples for classes {classes}")
    caps = dataset.class_captions(classes) if captions is None else captions
    pred = model.predict(np.stack([e.image for e in chosen]), caps)
    truth = np.array([classes.index(e.label) for e in chosen])
    return 100.0 * float(np.mean(pred == truth))


def evaluate(model: TrainedModel, examples=None, plan=None) -> tuple[float, float, float]:
    """(base accuracy, novel accuracy, harmonic mean) on the test pool."""
    examples = model.dataset.test if examples is None else examples
    plan = plan or split_base_novel(range(model.dataset.num_classes))
    base = accuracy(model, examples, plan.base)
    novel = accuracy(model, examples, plan.novel)
    return base, novel, harmonic_mean(base, novel)


def _prompt_similarities(model: TrainedModel, bank, captions) -> list[float]:
    sched = model.schedule()
    if not sched.text:
        return []
    with nx.no_grad():
        _, hidden = encode_texts(model.backbone, captions, sched.text, return_hidden=True)
        return [kd_similarity(prompt_states(sched.text, hidden, s), bank.tensor(s)).item()
                for s in range(len(bank.vectors))]


def reference_bank(backbone: Backbone, dataset: Dataset):
    return capture_reference_prompts(backbone, dataset.template(), template_positions(dataset.spec.template_length))


def train(config: TrainConfig) -> tuple[RunRecord, TrainedModel]:
    """Fine-tune the prompts of ``config`` and evaluate base/novel accuracy."""
    start = time.perf_counter()
    model_cfg = config.model_config()
    backbone = pretrained_backbone(model_cfg, config.pretrain_config())
    dataset = gen_synth_dataset(config.dataset_spec(), model_cfg)
    plan = split_base_novel(range(dataset.num_classes))
    shots = sample_few_shot(dataset.train, plan.base, config.shots, config.seed)
    bank = reference_bank(backbone, dataset)
    strategy = config.prompt_strategy()
    template = list(TEMPLATE_WORDS[:config.template_length])
    prompt_set = init_prompt_set(strategy, backbone, template, config.effective_depth(),
                                 config.prompt_length, config.seed)
    model = TrainedModel(config, backbone, prompt_set, strategy, dataset)
    learnables = prompt_set.parameters()
    record = RunRecord(config=json.loads(json.dumps(config.as_dict())), seed=config.seed,
                       backbone_checksum=backbone.checksum())

    captions = dataset.class_captions(plan.base)
    images = np.stack([e.image for e in shots])
    labels = np.array([plan.base.index(e.label) for e in shots])
    use_kd = strategy.kd_enabled and strategy.kd_layers > 0
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch, 0x5F]).permutation(len(shots))
            sums = np.zeros(3)
            n_batches = 0
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                breakdown = _step_loss(model, images[idx], labels[idx], captions, bank, use_kd)
                if learnables:
                    nx.backward(breakdown.total, leaves=learnables)
                    sgd_step(learnables, config.lr, backbone)
                    zero_grads(learnables)
                sums += (breakdown.ce.item(), breakdown.kd_penalty, breakdown.total.item())
                n_batches += 1
            ce, kd, tot = sums / n_batches
            record.epoch_losses.append({"ce": ce, "kd": kd, "total": tot})
        base, novel, hm = evaluate(model)
        record.accuracy = {"base": base, "novel": novel, "hm": hm}
        sims = _prompt_similarities(model, bank, captions)
        record.prompt_similarity = sims
        record.prompt_distances = [1.0 - s for s in sims]
        if sims and strategy.kd_layers > 0:
            record.final_kd_similarity = float(np.mean(sims[len(sims) - strategy.kd_layers:]))
    except NumericalError as err:
        record.status = "diverged"
        record.error = str(err)
    record.backbone_checksum_end = backbone.checksum()
    record.prompt_checkpoint = prompt_set.state()
    record.wall_clock = time.perf_counter() - start
    return record, model


def _step_loss(model, images, labels, captions, bank, use_kd):
    sched = model.schedule()
    x = encode_images(model.backbone, images, sched.vision)
    z, hidden = encode_texts(model.backbone, captions, sched.text, return_hidden=True)
    ce = nx.cross_entropy(cosine_logits(x, z, model.backbone.config.temperature), labels)
    s = model.strategy
    terms = distillation_terms(sched.text, hidden, bank, s.kd_layers) if use_kd else []
    return total_loss(ce, terms, s.kd_weight if use_kd else 0.0, len(terms))


def train_run(config: TrainConfig) -> RunRecord:
    return train(config)[0]


def model_from_record(record: RunRecord) -> TrainedModel:
    """Rebuild the trained model from a record's config and prompt checkpoint."""
    config = TrainConfig.from_mapping(record.config)
    backbone = pretrained_backbone(config.model_config(), config.pretrain_config())
    if backbone.checksum() != record.backbone_checksum:
        raise ConfigError("record was produced by a different backbone")
    dataset = gen_synth_dataset(config.dataset_spec(), config.model_config())
    prompt_set = PromptSet.from_state(config.strategy, record.prompt_checkpoint)
    return TrainedModel(config, backbone, prompt_set, config.prompt_strategy(), dataset)


# --------------------------------------------------------------------------- transfer protocols


def cross_dataset_eval(model: TrainedModel, specs) -> list[float]:
    """Accuracy over all classes of each target dataset; never updates parameters."""
    before = model.backbone.checksum(), [p.data.copy() for p in model.prompt_set.parameters()]
    out = []
    for spec in specs:
        if isinstance(spec, Dataset):
            target = spec
        else:
            if spec.world_seed != model.dataset.spec.world_seed:
                raise ConfigError("target dataset lives in a different concept world")
            target = gen_synth_dataset(spec, model.backbone.config)
        if target.vocab_size != model.dataset.vocab_size or target.seq_len != model.dataset.seq_len:
            raise ConfigError("target dataset vocabulary or caption length differs from the source")
        out.append(accuracy(model, target.test, range(target.num_classes), dataset=target))
    _assert_unchanged(model, before)
    return out


SHIFT_KINDS = ("pixel_noise", "contrast", "token_dropout")


def shifted_copy(dataset: Dataset, kind: str, magnitude: float, seed: int):
    """Test examples and class captions under a domain shift.

    ``pixel_noise`` adds Normal(0, magnitude²) pixels; ``contrast`` shrinks each
    image towards its mean by ``magnitude``; ``token_dropout`` replaces each
    template word of the class captions by PAD with probability ``magnitude``.
    """
    if kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift {kind!r}; choose from {', '.join(SHIFT_KINDS)}")
    if magnitude < 0:
        raise ConfigError("shift magnitude must be non-negative")
    rng = np.random.default_rng([seed, 0x5A])
    examples = [dataclasses.replace(e) for e in dataset.test]
    captions = dataset.class_captions()
    if kind == "pixel_noise":
        for e in examples:
            e.image = e.image + magnitude * rng.normal(0.0, 1.0, e.image.shape)
    elif kind == "contrast":
        if magnitude > 1:
            raise ConfigError("contrast reduction must lie in [0, 1]")
        for e in examples:
            mu = e.image.mean()
            e.image = mu + (1.0 - magnitude) * (e.image - mu)
    else:
        if magnitude > 1:
            raise ConfigError("dropout probability must lie in [0, 1]")
        positions = list(template_positions(dataset.spec.template_length))
        drop = rng.random((captions.shape[0], len(positions))) < magnitude
        captions = captions.copy()
        for row in range(captions.shape[0]):
            for j, pos in enumerate(positions):
                if drop[row, j]:
                    captions[row, pos] = PAD
    return examples, captions


def domain_shift_eval(model: TrainedModel, kind: str, magnitude: float, seed: int = 0, classes=None) -> float:
    """Accuracy on shifted copies of the source test pool (default: the trained base classes)."""
    before = model.backbone.checksum(), [p.data.copy() for p in model.prompt_set.parameters()]
    classes = list(split_base_novel(range(model.dataset.num_classes)).base if classes is None else classes)
    examples, captions = shifted_copy(model.dataset, kind, magnitude, seed)
    acc = accuracy(model, examples, classes, captions=captions[classes])
    _assert_unchanged(model, before)
    return acc


def _assert_unchanged(model, before):
    checksum, prompts = before
    if model.backbone.checksum() != checksum or any(
            not np.array_equal(a, p.data) for a, p in zip(prompts, model.prompt_set.parameters())):
        raise AssertionError("evaluation modified model parameters")
