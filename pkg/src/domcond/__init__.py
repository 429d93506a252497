"""Domain-conditional digit classifiers on a small numpy autodiff core."""

from .data import (
    DOMAINS,
    ImageDataset,
    Minibatch,
    MinibatchSampler,
    load_idx,
    load_mnist_dir,
    sample_minibatch,
    split_dataset,
    synthetic_digits,
    transform_blur,
    transform_colorflip,
    transform_hflip,
    transform_rotate,
    write_idx,
)
from .layers import (
    Conv2dLayer,
    EmbeddingTable,
    FiLMGenerator,
    LinearLayer,
    embedding_lookup,
    film_apply,
    film_generate,
    film_penalty,
)
from .models import (
    ModelBundle,
    ModelVariant,
    UnsupportedModeError,
    build_model,
    domain_forward,
    load_checkpoint,
    predict_domain,
    predict_task,
    save_checkpoint,
    task_forward,
)
from .probes import (
    EmbeddingSet,
    ProbeReport,
    export_embeddings,
    extract_film_params,
    extract_z_embeddings,
    logistic_probe_cv,
)
from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    ValidationError,
    backward,
    conv2d,
    entropy,
    global_avg_pool,
    grad_check,
    matmul,
    maxpool2x2,
    no_grad,
    relu,
    softmax_cross_entropy,
)
from .training import (
    AdamState,
    CheckpointSelection,
    EpochMetrics,
    TrainConfig,
    adam_update,
    adversarial_train_step,
    evaluate,
    loss_total,
    run_training,
    train_step,
)

__version__ = "0.1.0"
