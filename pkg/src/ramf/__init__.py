"""Reasoning-aware multimodal fusion for hateful video classification."""

from .errors import *  # noqa: F401,F403
from .feature_io import (
    DatasetManifest,
    FeatureBundle,
    FeatureTable,
    ModalitySpec,
    decode_bundle,
    desk_specs,
    encode_bundle,
    fit_length,
    generate_synthetic,
    load_bundle,
    load_table,
    full_specs,
    save_bundle,
    synthetic_bundles,
    write_dataset,
)
from .lgcf import LGCF, LGCFConfig, lgcf_param_count
from .model import (
    VARIANTS,
    ModelConfig,
    RAMFModel,
    build_model,
    desk_config,
    expected_param_count,
    forward_mf,
    forward_ramf,
    load_checkpoint,
    make_variant,
    full_config,
    param_count,
    save_checkpoint,
)
from .reasoning import (
    BackendSpec,
    CountingBackend,
    HttpBackend,
    MockBackend,
    PromptTemplate,
    ReasoningPipeline,
    ReasoningTriple,
    ResponseCache,
    embed_text,
    generate_cot,
    generate_triple,
    parse_verdict,
    render_prompt,
    run_zero_shot,
)
from .sca import SCA, AttentionTrace, SCAConfig, extract_contribution
from .train_eval import (
    FoldPlan,
    MetricsReport,
    TrainConfig,
    compute_metrics,
    contribution_trend,
    cross_validate,
    evaluate,
    plan_folds,
    profile,
    train,
)

__version__ = "0.1.0"
