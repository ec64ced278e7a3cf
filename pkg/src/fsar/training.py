"""Episodic training and evaluation driver.

One optimizer step per episode: sample -> encode both branches -> prototype
enhancement -> fused losses -> backward -> Adam.  The (config, seed) pair
fully determines the training log and the final checkpoint bytes.
Evaluation never builds autodiff graphs and may be fanned out across
workers over an immutable checkpoint; accuracies merge order-independently.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fsar.config import RunConfig
from fsar.data import (
    DatasetManifest,
    Episode,
    InputError,
    load_embedding_file,
    sample_episode,
    synth_dataset,
)
from fsar.encoder import BackboneConfig, MultimodalEncoder
from fsar.metrics import (
    METRIC_REGISTRY,
    EpisodeLosses,
    ScoreBundle,
    episode_losses,
    make_score_bundle,
    text_branch,
)
from fsar.tensor import ContractError, ParamRegistry, Tensor, no_grad, stack
from fsar.text import TextProvider
from fsar.tpcm import PrototypeBuilder

CENSUS_GROUPS = {
    "backbone.": "backbone_frozen",
    "text_frozen.": "text_frozen",
    "adapter.": "adapters",
    "fc_text.": "fc_text",
    "tpcm.": "tpcm",
    "proj.": "projections",
}


class FewShotModel:
    """Encoder + prototype builder + frozen text provider over one registry."""

    def __init__(self, config: RunConfig, num_classes: int):
        self.config = config
        self.registry = ParamRegistry()
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(seeds[0])
        backbone = BackboneConfig(
            layers=config.layers,
            dim=config.dim,
            heads=config.heads,
            patch_tokens=config.patch_tokens,
            frames=config.frames,
            text_dim=config.text_dim,
            patch_dim=config.patch_dim,
            adapter_ratio=config.adapter_ratio,
            joint_scale_r=config.joint_scale_r,
            adapter_skip=config.adapter_skip,
            train_output_proj=config.train_output_proj,
        )
        self.encoder = MultimodalEncoder(backbone, self.registry, rng)
        self.tpcm = PrototypeBuilder(self.registry, config.text_dim, rng, heads=config.tpcm_heads)
        self.provider = TextProvider(
            text_dim=config.text_dim,
            known_classes=num_classes,
            seed=config.seed + 7,
            width=config.text_width,
            layers=config.text_layers,
            heads=config.text_heads,
            tokens=config.text_tokens,
            registry=self.registry,
        )
        if not config.use_tma:
            for name, t in self.registry.items():
                if name.startswith(("adapter.", "fc_text.")):
                    self.registry._frozen.add(name)
                    t.requires_grad = False
        if not config.use_tpcm:
            for name, t in self.registry.items():
                if name.startswith("tpcm."):
                    self.registry._frozen.add(name)
                    t.requires_grad = False
        self.metric = METRIC_REGISTRY[config.metric]

    # -- per-episode forward -------------------------------------------------------

    def _encode_support(self, frames: np.ndarray, text_vector: np.ndarray) -> Tensor:
        if not self.config.use_tma:
            return self.encoder.encode_frozen(frames)
        if not self.config.support_text:
            return self.encoder.encode_query(frames)
        return self.encoder.encode_support(frames, text_vector)

    def _encode_query(self, frames: np.ndarray) -> Tensor:
        if not self.config.use_tma:
            return self.encoder.encode_frozen(frames)
        return self.encoder.encode_query(frames)

    def _distance(self, q: Tensor, s: Tensor) -> Tensor:
        return self.metric.fn(q, s, lam=self.config.lam, omega=self.config.omega)

    def score_episode(
        self, episode: Episode, mode: str, rng: np.random.Generator
    ) -> tuple[EpisodeLosses, ScoreBundle]:
        """Full forward pass; mode picks the text-template protocol."""
        cfg = self.config
        texts = {
            c: self.provider.embed_class_text(c, mode, rng).vector for c in episode.class_ids
        }

        support_feats: dict[int, list[Tensor]] = {}
        support_avgs: list[Tensor] = []
        support_labels: list[int] = []
        for label, c in enumerate(episode.class_ids):
            feats = [self._encode_support(v.frames, texts[c]) for v in episode.support[c]]
            support_feats[c] = feats
            for f in feats:
                support_avgs.append(f.mean(axis=0))
                support_labels.append(label)
        query_feats = [self._encode_query(v.frames) for v in episode.queries]
        query_avgs = [f.mean(axis=0) for f in query_feats]
        query_labels = episode.query_labels()

        if cfg.use_tpcm:
            prototypes, enhanced_queries = self.tpcm.build_prototypes(
                support_feats, texts, query_feats
            )
        else:
            prototypes = {
                c: (feats[0] if len(feats) == 1 else stack(feats, axis=0).mean(axis=0))
                for c, feats in support_feats.items()
            }
            enhanced_queries = query_feats

        dist_rows = []
        for q in enhanced_queries:
            dist_rows.append(
                stack([self._distance(q, prototypes[c]) for c in episode.class_ids], axis=0)
            )
        dist_logits = [row * (-1.0 / cfg.tau_d) for row in dist_rows]

        text_list = [texts[c] for c in episode.class_ids]
        sim_s2t, _ = text_branch(support_avgs, text_list, cfg.tau)
        sim_q2t, _ = text_branch(query_avgs, text_list, cfg.tau)
        s2t_logits = [sim_s2t[i, :] * (1.0 / cfg.tau) for i in range(len(support_avgs))]
        q2t_logits = [sim_q2t[i, :] * (1.0 / cfg.tau) for i in range(len(query_avgs))]

        losses = episode_losses(
            dist_logits, query_labels, s2t_logits, support_labels, q2t_logits,
            cfg.alpha, cfg.label_smoothing,
        )
        bundle = make_score_bundle(
            distances=np.stack([row.data for row in dist_rows]),
            sim_s2t=sim_s2t.data,
            sim_q2t=sim_q2t.data,
            alpha=cfg.alpha,
            tau=cfg.tau,
            tau_d=cfg.tau_d,
        )
        return losses, bundle


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(registry: ParamRegistry, state: AdamState, lr: float) -> AdamState:
    """Standard bias-corrected Adam over the trainable entries only."""
    state.step += 1
    t = state.step
    for name, p in registry.trainable().items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ContractError(f"optimizer state shape {m.shape} mismatches {name}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def lr_at(config: RunConfig, episode_index: int) -> float:
    """Multi-step schedule: decay by gamma at every milestone passed."""
    decays = sum(1 for m in config.milestones if episode_index >= m)
    return config.lr * (config.gamma**decays)


# -- dataset / checkpoint plumbing ----------------------------------------------------


def build_manifest(config: RunConfig) -> DatasetManifest:
    if config.data == "synth":
        return synth_dataset(
            classes=config.synth_classes,
            videos_per_class=config.synth_videos_per_class,
            frames=config.synth_frames,
            grid=(config.synth_grid_rows, config.synth_grid_cols, config.patch_dim),
            seed=config.synth_seed,
            noise=config.synth_noise,
            drift=config.synth_drift,
        )
    return load_embedding_file(config.data)


CHECKPOINT_MAGIC = b"FSCP"


def save_checkpoint(registry: ParamRegistry, path: str | Path) -> None:
    """Named-tensor container: shape header plus little-endian f32 payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", 1, len(registry.names())))
        for name, t in registry.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<H", t.ndim))
            for extent in t.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(t.data.astype("<f4").tobytes())


def load_checkpoint(registry: ParamRegistry, path: str | Path) -> None:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != 1:
        raise ContractError(f"unsupported checkpoint version {version}")
    offset = 10
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if name not in registry:
            raise ContractError(f"checkpoint parameter {name!r} unknown to this architecture")
        target = registry[name]
        if tuple(shape) != target.shape:
            raise ContractError(
                f"checkpoint shape {tuple(shape)} != model shape {target.shape} for {name!r}"
            )
        target.data[...] = data.astype(np.float64)
        seen.add(name)
    missing = set(registry.names()) - seen
    if missing:
        raise ContractError(f"checkpoint missing parameters: {sorted(missing)[:5]} ...")


# -- census ------------------------------------------------------------------------------


def census_from_registry(registry: ParamRegistry) -> dict:
    groups: dict[str, dict[str, int]] = {}
    for name, t in registry.items():
        group = next((g for p, g in CENSUS_GROUPS.items() if name.startswith(p)), "other")
        entry = groups.setdefault(group, {"total": 0, "tunable": 0})
        entry["total"] += t.size
        if not registry.is_frozen(name):
            entry["tunable"] += t.size
    total = sum(g["total"] for g in groups.values())
    tunable = sum(g["tunable"] for g in groups.values())
    return {"total": total, "tunable": tunable, "groups": groups}


def param_census(config: RunConfig) -> dict:
    model = FewShotModel(config, num_classes=config.synth_classes)
    return census_from_registry(model.registry)


# -- train / evaluate ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FewShotModel
    log: list[dict]
    manifest: DatasetManifest


def train(config: RunConfig, manifest: DatasetManifest | None = None) -> TrainResult:
    """Run episodes_train optimizer steps on the train split."""
    if manifest is None:
        manifest = build_manifest(config)
    if len(manifest.classes_in_split("train")) < config.way:
        raise InputError(
            f"train split has {len(manifest.classes_in_split('train'))} classes, needs {config.way}"
        )
    model = FewShotModel(config, num_classes=len(manifest.class_vocabulary))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE1]))
    state = AdamState()
    log: list[dict] = []
    for i in range(config.episodes_train):
        episode = sample_episode(
            manifest, config.way, config.shot, config.queries, config.frames,
            "train", rng, mode="train",
        )
        model.registry.zero_grad()
        losses, _ = model.score_episode(episode, "train", rng)
        losses.total.backward()
        lr = lr_at(config, i)
        adam_step(model.registry, state, lr)
        log.append(
            {
                "episode": i,
                "lr": lr,
                "loss": losses.total.item(),
                "loss_q2s": losses.l_q2s.item(),
                "loss_s2t": losses.l_s2t.item(),
                "loss_q2t": losses.l_q2t.item(),
            }
        )
    return TrainResult(model=model, log=log, manifest=manifest)


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    episodes: int
    records: list[dict]
    census: dict
    config_echo: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_accuracy": self.mean_accuracy,
                "ci95": self.ci95,
                "episodes": self.episodes,
                "census": self.census,
                "config": self.config_echo,
                "records": self.records,
            },
            indent=2,
        )


def evaluate(
    config: RunConfig,
    model: FewShotModel,
    manifest: DatasetManifest | None = None,
    episodes: int | None = None,
    split: str = "test",
    seed_offset: int = 0,
) -> EvalReport:
    """Classify fused-argmax over episodes of the given split."""
    if manifest is None:
        manifest = build_manifest(config)
    n = episodes if episodes is not None else config.episodes_eval
    if len(manifest.classes_in_split(split)) < config.way:
        raise InputError(
            f"{split} split has {len(manifest.classes_in_split(split))} classes, needs {config.way}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xEA7, seed_offset]))
    records: list[dict] = []
    correct_sum = 0
    query_count = 0
    per_episode_acc = []
    for i in range(n):
        episode = sample_episode(
            manifest, config.way, config.shot, config.queries, config.frames,
            split, rng, mode="eval",
        )
        with no_grad():
            _, bundle = model.score_episode(episode, "eval", rng)
        labels = episode.query_labels()
        preds = np.argmax(bundle.fused, axis=1)
        hits = int(np.sum(preds == np.asarray(labels)))
        correct_sum += hits
        query_count += len(labels)
        per_episode_acc.append(hits / len(labels))
        records.append(
            {
                "episode": i,
                "true": labels,
                "predicted": [int(p) for p in preds],
                "accuracy": hits / len(labels),
                "fused": [list(map(float, row)) for row in bundle.fused],
            }
        )
    acc = np.asarray(per_episode_acc)
    mean = float(acc.mean())
    ci = float(1.96 * acc.std(ddof=1) / np.sqrt(len(acc))) if len(acc) > 1 else 0.0
    return EvalReport(
        mean_accuracy=mean,
        ci95=ci,
        episodes=n,
        records=records,
        census=census_from_registry(model.registry),
        config_echo={"metric": config.metric, "way": config.way, "shot": config.shot,
                     "alpha": config.alpha, "seed": config.seed},
    )
