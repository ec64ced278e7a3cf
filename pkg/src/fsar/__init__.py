"""Episodic few-shot video recognition with adapter-tuned frozen backbones."""

from fsar.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from fsar.data import (
    DatasetManifest,
    Episode,
    FormatError,
    InputError,
    VideoRecord,
    load_embedding_file,
    sample_episode,
    save_embedding_file,
    synth_dataset,
    tsn_sample,
)
from fsar.encoder import Adapter, BackboneConfig, MultimodalEncoder
from fsar.metrics import (
    METRIC_REGISTRY,
    MetricDescriptor,
    ScoreBundle,
    bimhm_distance,
    episode_losses,
    fuse_predictions,
    make_score_bundle,
    otam_distance,
    register_metric,
    text_branch,
    trx_distance,
)
from fsar.tensor import ContractError, DimensionError, ParamRegistry, Tensor, no_grad
from fsar.text import NUM_TEMPLATES, TextEmbedding, TextProvider
from fsar.tpcm import PrototypeBuilder
from fsar.training import (
    AdamState,
    EvalReport,
    FewShotModel,
    TrainResult,
    adam_step,
    build_manifest,
    evaluate,
    load_checkpoint,
    param_census,
    save_checkpoint,
    train,
)

__all__ = [
    "AdamState",
    "Adapter",
    "BackboneConfig",
    "ConfigError",
    "ContractError",
    "DatasetManifest",
    "DimensionError",
    "Episode",
    "EvalReport",
    "FewShotModel",
    "FormatError",
    "InputError",
    "METRIC_REGISTRY",
    "MetricDescriptor",
    "MultimodalEncoder",
    "NUM_TEMPLATES",
    "ParamRegistry",
    "PrototypeBuilder",
    "RunConfig",
    "ScoreBundle",
    "Tensor",
    "TextEmbedding",
    "TextProvider",
    "TrainResult",
    "VideoRecord",
    "adam_step",
    "bimhm_distance",
    "build_manifest",
    "dump_config",
    "episode_losses",
    "evaluate",
    "fuse_predictions",
    "load_checkpoint",
    "load_config",
    "load_embedding_file",
    "make_score_bundle",
    "no_grad",
    "otam_distance",
    "param_census",
    "parse_config",
    "register_metric",
    "sample_episode",
    "save_checkpoint",
    "save_embedding_file",
    "synth_dataset",
    "text_branch",
    "train",
    "trx_distance",
    "tsn_sample",
]
