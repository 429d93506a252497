"""Training loop, Adam with global-norm clipping, and evaluation protocols.

Each run owns one model bundle and optimizer state; the per-epoch record
tracks loss components plus in-domain validation and out-of-domain accuracy,
and three checkpoints are kept: best validation accuracy, best validation
loss, and the oracle (best out-of-domain accuracy).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DOMAINS, ImageDataset, Minibatch, MinibatchSampler, split_dataset, transform_batch
from .layers import film_penalty
from .models import (
    CHECKPOINT_VERSION,
    ModelBundle,
    ModelVariant,
    UnsupportedModeError,
    build_model,
    load_checkpoint,
    predict_task,
    task_forward,
)
from .tensor import (
    Parameter,
    Tensor,
    ValidationError,
    add,
    backward,
    detach,
    entropy,
    global_avg_pool,
    no_grad,
    scale,
    softmax_cross_entropy,
    sum_squares,
)

EVAL_PASSES = 10
EVAL_BATCH = 512


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.CONDITIONAL
    domain_weight: float = 0.5        # mix between task and domain cross entropy
    film_penalty_weight: float = 1e-4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_weight: float = 1e-4
    label_smoothing: float = 0.0
    clip_norm: float = 200.0
    entropy_weight: float = 0.1       # adversarial variant only
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    val_fraction: float = 1.0 / 6.0

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        if not 0.0 <= self.domain_weight <= 1.0:
            raise ValidationError(f"domain_weight must be in [0, 1], got {self.domain_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        for name in ("film_penalty_weight", "lr", "l2_weight", "entropy_weight"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be >= 0")
        if self.clip_norm <= 0.0:
            raise ValidationError("clip_norm must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


class AdamState:
    """Step counter for bias correction; moment tensors live on the parameters."""

    def __init__(self):
        self.t = 0


def clip_global_norm(params, threshold: float) -> float:
    """Rescale all grads so their concatenated L2 norm is <= threshold."""
    norm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if norm > threshold:
        factor = threshold / norm
        for p in params:
            p.grad *= factor
    return norm


def adam_update(params, state: AdamState, cfg: TrainConfig) -> None:
    """Clip the global gradient norm, then take one bias-corrected Adam step."""
    params = list(params)
    clip_global_norm(params, cfg.clip_norm)
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for p in params:
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * p.grad
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * (p.grad * p.grad)
        p.data -= cfg.lr * (p.m / c1) / (np.sqrt(p.v / c2) + cfg.adam_eps)


def loss_total(task_ce: Tensor, domain_ce: Tensor | None, omega: Tensor | None,
               domain_weight: float, film_penalty_weight: float) -> Tensor:
    """(1 - w) * task + w * domain + penalty_weight * omega.

    Absent terms are dropped from the graph entirely, so a zero weight is
    bit-identical to never computing the term.
    """
    if not 0.0 <= domain_weight <= 1.0:
        raise ValidationError(f"domain_weight must be in [0, 1], got {domain_weight}")
    if domain_ce is None and domain_weight > 0.0:
        raise ValidationError("domain_weight > 0 requires a domain cross-entropy term")
    parts = []
    if domain_weight < 1.0:
        parts.append(task_ce if domain_weight == 0.0 else scale(task_ce, 1.0 - domain_weight))
    if domain_ce is not None and domain_weight > 0.0:
        parts.append(scale(domain_ce, domain_weight))
    if omega is not None and film_penalty_weight > 0.0:
        parts.append(scale(omega, film_penalty_weight))
    loss = parts[0]
    for extra in parts[1:]:
        loss = add(loss, extra)
    return loss


def l2_penalty(params) -> Tensor | None:
    """Sum of squared parameter values (scalar), or None for an empty set."""
    acc = None
    for p in params:
        term = sum_squares(p)
        acc = term if acc is None else add(acc, term)
    return acc


def _weight_decay_params(bundle: ModelBundle) -> list[Parameter]:
    film = {id(p) for p in bundle.film_parameters()}
    return [p for p in bundle.parameters() if id(p) not in film]


def _with_l2(loss: Tensor, params, weight: float) -> Tensor:
    if weight <= 0.0:
        return loss
    penalty = l2_penalty(params)
    return loss if penalty is None else add(loss, scale(penalty, weight))


def joint_loss(bundle: ModelBundle, batch: Minibatch, cfg: TrainConfig):
    """Forward pass plus the full training objective for one minibatch.

    Returns (loss, component dict); components hold plain floats with None
    for terms the variant does not produce.
    """
    out = bundle.forward(Tensor(batch.x), domain_ids=batch.domains)
    task_ce = softmax_cross_entropy(out.class_logits, batch.labels, cfg.label_smoothing)
    domain_ce = None
    if out.domain_logits is not None:
        domain_ce = softmax_cross_entropy(out.domain_logits, batch.domains)
    omega = film_penalty(out.film_pairs) if out.film_pairs else None

    supervised = bundle.variant.has_domain_supervision
    loss = loss_total(task_ce,
                      domain_ce if supervised else None,
                      omega,
                      cfg.domain_weight if supervised else 0.0,
                      cfg.film_penalty_weight)
    loss = _with_l2(loss, _weight_decay_params(bundle), cfg.l2_weight)
    parts = {"task_ce": task_ce.item(),
             "domain_ce": domain_ce.item() if domain_ce is not None else None,
             "omega": omega.item() if omega is not None else None,
             "loss": loss.item()}
    return loss, parts


def train_step(bundle: ModelBundle, batch: Minibatch, cfg: TrainConfig,
               state: AdamState) -> dict:
    """One forward/backward/Adam step of the joint objective (non-adversarial)."""
    if bundle.variant is ModelVariant.ADVERSARIAL:
        raise ValidationError("adversarial bundles train through adversarial_train_step")
    params = bundle.parameters()
    for p in params:
        p.zero_grad()
    loss, parts = joint_loss(bundle, batch, cfg)
    backward(loss)
    adam_update(params, state, cfg)
    return parts


def adversarial_train_step(bundle: ModelBundle, batch: Minibatch, cfg: TrainConfig,
                           head_state: AdamState, backbone_state: AdamState,
                           step_index: int) -> dict:
    """Alternating adversarial updates, one per step.

    Even steps fit the domain head on detached backbone features; odd steps
    update backbone + task head on task loss minus the entropy bonus of the
    domain head's predictions.
    """
    if bundle.variant is not ModelVariant.ADVERSARIAL:
        raise ValidationError("adversarial_train_step requires the adversarial variant")
    head_params = bundle.adversary_head.parameters()
    backbone_params = bundle.task.parameters()
    for p in head_params + backbone_params:
        p.zero_grad()
    logits, _, trunk = task_forward(bundle.task, Tensor(batch.x), None)
    feats = global_avg_pool(trunk)
    if step_index % 2 == 0:
        domain_logits = bundle.adversary_head(detach(feats))
        domain_ce = softmax_cross_entropy(domain_logits, batch.domains)
        loss = _with_l2(domain_ce, head_params, cfg.l2_weight)
        backward(loss)
        adam_update(head_params, head_state, cfg)
        return {"task_ce": None, "domain_ce": domain_ce.item(), "omega": None,
                "loss": loss.item()}
    domain_logits = bundle.adversary_head(feats)
    task_ce = softmax_cross_entropy(logits, batch.labels, cfg.label_smoothing)
    ent = entropy(domain_logits)
    loss = task_ce if cfg.entropy_weight == 0.0 else add(task_ce, scale(ent, -cfg.entropy_weight))
    loss = _with_l2(loss, backbone_params, cfg.l2_weight)
    backward(loss)
    adam_update(backbone_params, backbone_state, cfg)
    return {"task_ce": task_ce.item(), "domain_ce": None, "omega": None,
            "loss": loss.item()}


# ---------------------------------------------------------------------------
# evaluation


def _forward_logits(bundle: ModelBundle, x: np.ndarray, domain_ids=None):
    return bundle.forward(Tensor(x), domain_ids=domain_ids)


def _in_domain_pass(bundle: ModelBundle, ds: ImageDataset, rng, collect_loss: bool):
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(ds), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        ids = rng.integers(0, len(DOMAINS), size=len(ds.labels[sl]))
        x = transform_batch(ds.images[sl], ids, rng)
        out = _forward_logits(bundle, x, domain_ids=ids)
        correct += int((predict_task(out.class_logits) == ds.labels[sl]).sum())
        if collect_loss:
            ce = softmax_cross_entropy(out.class_logits, ds.labels[sl])
            loss_sum += ce.item() * len(ds.labels[sl])
    return correct, loss_sum


def evaluate(bundle: ModelBundle, ds: ImageDataset, mode: str,
             rng: np.random.Generator | None = None) -> float:
    """Accuracy in percent.

    out_of_domain: one pass over untransformed images (conditioning computed
    from the same clean input). in_domain: ten passes, each with a fresh
    random domain transform per example, averaged over all predictions.
    """
    if mode == "out_of_domain":
        if bundle.variant is ModelVariant.EMBEDDING_CONDITIONED:
            raise UnsupportedModeError(
                "embedding_conditioned supports in-domain prediction only")
        with no_grad():
            correct = 0
            for start in range(0, len(ds), EVAL_BATCH):
                sl = slice(start, start + EVAL_BATCH)
                out = _forward_logits(bundle, ds.images[sl])
                correct += int((predict_task(out.class_logits) == ds.labels[sl]).sum())
        return 100.0 * correct / len(ds)
    if mode == "in_domain":
        if rng is None:
            raise ValidationError("in_domain evaluation needs an rng for transform draws")
        with no_grad():
            correct = 0
            for _ in range(EVAL_PASSES):
                got, _ = _in_domain_pass(bundle, ds, rng, collect_loss=False)
                correct += got
        return 100.0 * correct / (EVAL_PASSES * len(ds))
    raise ValidationError(f"unknown evaluation mode {mode!r}")


def validation_metrics(bundle: ModelBundle, ds: ImageDataset,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Single fresh-transform pass: (accuracy %, mean unsmoothed task CE)."""
    with no_grad():
        correct, loss_sum = _in_domain_pass(bundle, ds, rng, collect_loss=True)
    return 100.0 * correct / len(ds), loss_sum / len(ds)


# ---------------------------------------------------------------------------
# full runs


@dataclass
class EpochMetrics:
    epoch: int
    task_ce: float | None
    domain_ce: float | None
    omega: float | None
    val_acc: float
    val_loss: float
    ood_acc: float | None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class Checkpoint:
    epoch: int
    val_acc: float
    val_loss: float
    ood_acc: float | None
    params: dict = field(repr=False)


@dataclass
class CheckpointSelection:
    """Best-by-criterion checkpoints; oracle needs test-domain access."""

    best_val_acc: Checkpoint
    best_val_loss: Checkpoint
    oracle: Checkpoint | None

    def summary(self) -> dict:
        def row(cp):
            return None if cp is None else {"epoch": cp.epoch, "val_acc": cp.val_acc,
                                            "val_loss": cp.val_loss, "ood_acc": cp.ood_acc}
        out = {"best_val_acc": row(self.best_val_acc),
               "best_val_loss": row(self.best_val_loss),
               "oracle": row(self.oracle)}
        if self.oracle is not None and self.oracle.ood_acc is not None:
            out["oracle_gap"] = {
                "vs_val_acc": self.oracle.ood_acc - self.best_val_acc.ood_acc,
                "vs_val_loss": self.oracle.ood_acc - self.best_val_loss.ood_acc,
            }
        return out

    def evaluation_checkpoint(self) -> Checkpoint:
        """Oracle when out-of-domain access exists, else best validation accuracy."""
        return self.oracle if self.oracle is not None else self.best_val_acc


def _snapshot(bundle: ModelBundle) -> dict:
    return {p.name: p.data.copy() for p in bundle.parameters()}


def restore_snapshot(bundle: ModelBundle, params: dict) -> None:
    for p in bundle.parameters():
        p.data[...] = params[p.name]


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_training(cfg: TrainConfig, train_ds: ImageDataset, test_ds: ImageDataset,
                 run_dir=None, log=None) -> tuple[list[EpochMetrics], CheckpointSelection]:
    """Train one variant end to end and select checkpoints.

    The validation split is the tail val_fraction of train_ds, evaluated each
    epoch with fresh random transforms. Out-of-domain accuracy is the clean
    test set (skipped for the embedding-conditioned variant, which has no
    out-of-domain prediction rule).
    """
    bundle = build_model(cfg.variant, cfg.seed)
    fit_ds, val_ds = split_dataset(train_ds, cfg.val_fraction)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    sampler = MinibatchSampler(fit_ds, min(cfg.batch_size, len(fit_ds)), data_rng)

    adversarial = cfg.variant is ModelVariant.ADVERSARIAL
    state = AdamState()
    head_state = AdamState()
    step_index = 0

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(
            "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
        metrics_fh = open(run_dir / "metrics.jsonl", "w")

    history: list[EpochMetrics] = []
    best_acc = best_loss = oracle = None
    try:
        for epoch in range(cfg.epochs):
            sums = {"task_ce": [], "domain_ce": [], "omega": []}
            for batch in sampler.epoch():
                if adversarial:
                    step = adversarial_train_step(bundle, batch, cfg, head_state, state, step_index)
                else:
                    step = train_step(bundle, batch, cfg, state)
                step_index += 1
                for key in sums:
                    if step[key] is not None:
                        sums[key].append(step[key])
            val_acc, val_loss = validation_metrics(bundle, val_ds, val_rng)
            ood_acc = None
            if cfg.variant is not ModelVariant.EMBEDDING_CONDITIONED:
                ood_acc = evaluate(bundle, test_ds, "out_of_domain")
            em = EpochMetrics(epoch, _mean(sums["task_ce"]), _mean(sums["domain_ce"]),
                              _mean(sums["omega"]), val_acc, val_loss, ood_acc)
            history.append(em)
            if metrics_fh is not None:
                metrics_fh.write(em.to_json() + "\n")
                metrics_fh.flush()
            if log is not None:
                log(f"epoch {epoch}: val_acc={val_acc:.2f} val_loss={val_loss:.4f}"
                    + (f" ood_acc={ood_acc:.2f}" if ood_acc is not None else ""))

            cp = Checkpoint(epoch, val_acc, val_loss, ood_acc, _snapshot(bundle))
            if best_acc is None or val_acc > best_acc.val_acc:
                best_acc = cp
            if best_loss is None or val_loss < best_loss.val_loss:
                best_loss = cp
            if ood_acc is not None and (oracle is None or ood_acc > oracle.ood_acc):
                oracle = cp
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    selection = CheckpointSelection(best_acc, best_loss, oracle)
    if run_dir is not None:
        _write_selection(run_dir, bundle, selection)
    return history, selection


def _checkpoint_path(run_dir: Path, criterion: str) -> Path:
    return run_dir / f"checkpoint_{criterion}.npz"


def _write_selection(run_dir: Path, bundle: ModelBundle, selection: CheckpointSelection):
    named = {"val_acc": selection.best_val_acc, "val_loss": selection.best_val_loss,
             "oracle": selection.oracle}
    for criterion, cp in named.items():
        if cp is None:
            continue
        arrays = dict(cp.params)
        arrays["__checkpoint_version__"] = np.array(CHECKPOINT_VERSION)
        np.savez(_checkpoint_path(run_dir, criterion), **arrays)


def load_run_checkpoint(run_dir, bundle: ModelBundle, criterion: str = "oracle") -> Path:
    """Restore a saved criterion checkpoint into the bundle; returns the path.

    Falls back from oracle to val_acc for runs without out-of-domain access.
    """
    run_dir = Path(run_dir)
    path = _checkpoint_path(run_dir, criterion)
    if criterion == "oracle" and not path.exists():
        path = _checkpoint_path(run_dir, "val_acc")
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint for criterion {criterion!r} under {run_dir}")
    load_checkpoint(path, bundle)
    return path
