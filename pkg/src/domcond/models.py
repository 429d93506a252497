"""Model variants: domain-conditioned task network plus every ablation/baseline.

The task network is a two-conv backbone on 28x28 grayscale digits; conditional
variants modulate each conv's output with per-channel affine layers driven by
a 32-d conditioning vector from the domain network (or an embedding table).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .layers import (
    Conv2dLayer,
    EmbeddingTable,
    FiLMGenerator,
    LinearLayer,
    embedding_lookup,
    film_apply,
    film_generate,
)
from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    ValidationError,
    global_avg_pool,
    maxpool2x2,
    relu,
    reshape,
)

NUM_CLASSES = 10
NUM_DOMAINS = 4
COND_DIM = 32
IMAGE_SIDE = 28
CHECKPOINT_VERSION = 1


class UnsupportedModeError(ValueError):
    """The requested evaluation/extraction is undefined for this variant."""


class ModelVariant(str, Enum):
    CONDITIONAL = "conditional"
    SELF_MODULATED = "self_modulated"
    UNCONDITIONAL = "unconditional"
    EMBEDDING_CONDITIONED = "embedding_conditioned"
    ADVERSARIAL = "adversarial"
    CONDITIONAL_SCALE_ONLY = "conditional_scale_only"
    CONDITIONAL_OFFSET_ONLY = "conditional_offset_only"

    @property
    def has_domain_model(self) -> bool:
        return self in (ModelVariant.CONDITIONAL, ModelVariant.SELF_MODULATED,
                        ModelVariant.CONDITIONAL_SCALE_ONLY, ModelVariant.CONDITIONAL_OFFSET_ONLY)

    @property
    def has_film(self) -> bool:
        return self.has_domain_model or self is ModelVariant.EMBEDDING_CONDITIONED

    @property
    def has_domain_supervision(self) -> bool:
        """Whether the domain cross-entropy term participates in the loss."""
        return self in (ModelVariant.CONDITIONAL, ModelVariant.CONDITIONAL_SCALE_ONLY,
                        ModelVariant.CONDITIONAL_OFFSET_ONLY)

    @property
    def film_mode(self) -> str:
        if self is ModelVariant.CONDITIONAL_SCALE_ONLY:
            return "scale_only"
        if self is ModelVariant.CONDITIONAL_OFFSET_ONLY:
            return "offset_only"
        return "full"


class DomainModel:
    """Single conv + linear head predicting the domain; exposes pooled z."""

    def __init__(self, seed: int):
        self.conv = Conv2dLayer("domain.conv", 1, COND_DIM, 5, pad=2, seed=seed)
        self.head = LinearLayer("domain.head", COND_DIM, NUM_DOMAINS, seed=seed)

    def parameters(self):
        return self.conv.parameters() + self.head.parameters()


class TaskModel:
    """Two-conv ReLU backbone with optional modulation after each conv."""

    def __init__(self, seed: int, with_film: bool, film_mode: str = "full"):
        self.conv1 = Conv2dLayer("task.conv1", 1, 32, 5, pad=2, seed=seed)
        self.conv2 = Conv2dLayer("task.conv2", 32, 64, 5, pad=2, seed=seed)
        self.head = LinearLayer("task.head", 64 * 7 * 7, NUM_CLASSES, seed=seed)
        if with_film:
            self.films = [FiLMGenerator("task.film1", COND_DIM, 32, seed, film_mode),
                          FiLMGenerator("task.film2", COND_DIM, 64, seed, film_mode)]
        else:
            self.films = []

    def parameters(self):
        ps = self.conv1.parameters() + self.conv2.parameters()
        for gen in self.films:
            ps += gen.parameters()
        return ps + self.head.parameters()


def _check_images(x: Tensor):
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise DimensionError(f"expected (N, 1, {IMAGE_SIDE}, {IMAGE_SIDE}) images, got shape {x.shape}")


def domain_forward(model: DomainModel, x: Tensor):
    """Returns (domain_logits, z) with z the pooled post-relu conv activation."""
    _check_images(x)
    z = global_avg_pool(relu(model.conv(x)))
    return model.head(z), z


def task_forward(model: TaskModel, x: Tensor, z: Tensor | None):
    """Runs the backbone; returns (class_logits, film_pairs, trunk).

    film_pairs holds each modulation layer's (input, output) for the identity
    penalty; trunk is the (N, 64, 7, 7) feature map feeding the class head.
    """
    _check_images(x)
    if model.films and z is None:
        raise ValidationError("task_forward: this model is conditioned and needs z")
    h = model.conv1(x)
    pairs = []
    if model.films:
        s, o = film_generate(model.films[0], z)
        modulated = film_apply(h, s, o)
        pairs.append((h, modulated))
        h = modulated
    h = maxpool2x2(relu(h))
    h = model.conv2(h)
    if model.films:
        s, o = film_generate(model.films[1], z)
        modulated = film_apply(h, s, o)
        pairs.append((h, modulated))
        h = modulated
    trunk = maxpool2x2(relu(h))
    n = trunk.shape[0]
    logits = model.head(reshape(trunk, (n, 64 * 7 * 7)))
    return logits, pairs, trunk


def predict_task(class_logits) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest index."""
    data = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    return data.argmax(axis=1)


def predict_domain(domain_logits) -> np.ndarray:
    """Argmax over the domain axis; ties go to the lowest index."""
    return predict_task(domain_logits)


@dataclass
class ForwardOut:
    class_logits: Tensor
    domain_logits: Tensor | None
    film_pairs: list
    z: Tensor | None
    trunk: Tensor


class ModelBundle:
    """A variant's parameter set plus its forward wiring."""

    def __init__(self, variant: ModelVariant, seed: int):
        self.variant = variant
        self.seed = seed
        self.task = TaskModel(seed, with_film=variant.has_film, film_mode=variant.film_mode)
        self.domain = DomainModel(seed) if variant.has_domain_model else None
        self.embedding = (EmbeddingTable("embed", NUM_DOMAINS, COND_DIM, seed)
                          if variant is ModelVariant.EMBEDDING_CONDITIONED else None)
        self.adversary_head = (LinearLayer("adversary.head", 64, NUM_DOMAINS, seed)
                               if variant is ModelVariant.ADVERSARIAL else None)

    def parameters(self) -> list[Parameter]:
        ps = list(self.task.parameters())
        if self.domain is not None:
            ps += self.domain.parameters()
        if self.embedding is not None:
            ps += self.embedding.parameters()
        if self.adversary_head is not None:
            ps += self.adversary_head.parameters()
        return ps

    def film_parameters(self) -> list[Parameter]:
        return [p for gen in self.task.films for p in gen.parameters()]

    def forward(self, x: Tensor, domain_ids=None) -> ForwardOut:
        z = domain_logits = None
        if self.domain is not None:
            domain_logits, z = domain_forward(self.domain, x)
        elif self.embedding is not None:
            if domain_ids is None:
                raise ValidationError("embedding-conditioned forward needs domain ids")
            z = embedding_lookup(self.embedding, domain_ids)
        logits, pairs, trunk = task_forward(self.task, x, z)
        if self.adversary_head is not None:
            domain_logits = self.adversary_head(global_avg_pool(trunk))
        return ForwardOut(logits, domain_logits, pairs, z, trunk)


def build_model(variant: ModelVariant | str, seed: int) -> ModelBundle:
    """Deterministically initialized bundle; same seed, same parameters."""
    return ModelBundle(ModelVariant(variant), seed)


def save_checkpoint(path, bundle: ModelBundle) -> None:
    """Bit-exact flat map of parameter id -> values (npz, versioned)."""
    arrays = {p.name: p.data for p in bundle.parameters()}
    arrays["__checkpoint_version__"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **arrays)


def load_checkpoint(path, bundle: ModelBundle) -> None:
    """Restore parameter values in place; ids must match the bundle exactly."""
    with np.load(path) as stored:
        version = int(stored["__checkpoint_version__"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
        names = {p.name for p in bundle.parameters()}
        saved = set(stored.files) - {"__checkpoint_version__"}
        if names != saved:
            missing, extra = sorted(names - saved), sorted(saved - names)
            raise ValidationError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for p in bundle.parameters():
            arr = stored[p.name]
            if arr.shape != p.data.shape:
                raise ValidationError(f"checkpoint shape {arr.shape} != {p.data.shape} for {p.name}")
            p.data[...] = arr
