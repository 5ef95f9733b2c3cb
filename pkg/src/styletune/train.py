"""Two-stage training: contrastive pre-training of the backbone, then
prompt tuning with the combined style/consistency objective.

Determinism rules: every random draw comes from a stream derived from
(master seed, purpose, epoch, step), so runs are bit-reproducible and an
interrupted run resumed from a checkpoint continues the exact
uninterrupted trajectory. Frozen-view activations are cached per sample
during prompt tuning when no augmentation is active; caching is a pure
speedup and never changes values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import backbone_checksum, load_checkpoint, save_checkpoint
from .data import Dataset, FewShotSplit, random_crop
from .encoders import (
    DualEncoderState,
    EncoderConfig,
    class_token_batch,
    encode_image_frozen,
    encode_text_frozen,
    init_backbone,
    init_prompts,
    saturated_prompt_depth,
)
from .errors import CompatibilityError, ContractError, DimensionError, TrainingError
from .losses import (
    FrozenOutputs,
    LossWeights,
    TrainingBatch,
    ce_only_weights,
    total_loss,
)
from .seeding import rng_for, seed_sequence
from .style import init_style_bank
from .tensor import Tensor, logsumexp, matmul

RUN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "prompt_tune"  # "pretrain" | "prompt_tune"
    epochs: int = 25
    batch_size: int = 4
    learning_rate: float = 0.0025
    momentum: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    style_layer: int = 2
    n_style_bases: int = 12
    style_mode: str = "shift"  # "off" for the plain prompting baseline
    prompt_depth: int | None = None  # None: encoder config default
    augmentation: str = "none"  # "none" | "crop"
    optimizer: str = "sgd"  # prompt tuning is always sgd; pretrain defaults to adam
    max_steps: int | None = None  # stop-and-checkpoint after this many steps
    checkpoint_every: int = 1  # epochs between mid-run checkpoints

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.stage not in ("pretrain", "prompt_tune"):
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.augmentation not in ("none", "crop"):
            raise ContractError(f"unknown augmentation {self.augmentation!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
            "weights": self.weights.to_dict(),
            "encoder": self.encoder.to_dict(),
            "style_layer": self.style_layer,
            "n_style_bases": self.n_style_bases,
            "style_mode": self.style_mode,
            "prompt_depth": self.prompt_depth,
            "augmentation": self.augmentation,
            "optimizer": self.optimizer,
            "max_steps": self.max_steps,
            "checkpoint_every": self.checkpoint_every,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights.from_dict(d["weights"])
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return TrainConfig(**d)


def pretrain_defaults(**overrides) -> TrainConfig:
    # plain SGD cannot train these towers from scratch at desk scale; the
    # pre-training stand-in uses adam with class-stratified batches
    base = TrainConfig(stage="pretrain", epochs=30, batch_size=8, learning_rate=1e-3, optimizer="adam")
    return replace(base, **overrides)


def ivlp_baseline_config(base: TrainConfig) -> TrainConfig:
    """Plain prompting baseline: every extra loss off, no style shift."""
    return replace(base, weights=ce_only_weights(tau=base.weights.tau), style_mode="off")


@dataclass
class RunRecord:
    config: dict
    seed: int
    steps: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock_sec: float = 0.0
    effective_prompt_depth: int | None = None

    def deterministic_dict(self) -> dict:
        """Everything that must be bit-reproducible given (config, seed)."""
        return {
            "format_version": RUN_FORMAT_VERSION,
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps,
            "final": self.final,
            "effective_prompt_depth": self.effective_prompt_depth,
        }

    def summary_dict(self) -> dict:
        out = self.deterministic_dict()
        out["wall_clock_sec"] = self.wall_clock_sec
        return out

    def write(self, out_dir: str | Path):
        import json

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "records.jsonl", "w") as fh:
            for step in self.steps:
                fh.write(json.dumps(step, sort_keys=True) + "\n")
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(self.summary_dict(), fh, indent=1, sort_keys=True)


def step_seed(master: int, epoch: int, step: int) -> int:
    return int(seed_sequence(master, "step", epoch, step).generate_state(1)[0])


# -- optimizer ------------------------------------------------------------------


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """v <- momentum v + g; p <- p - lr v. Returns fresh buffers."""
    new_params: dict[str, Tensor] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {name} shape {p.data.shape}"
            )
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        out = Tensor(p.data - lr * v, requires_grad=p.requires_grad)
        new_params[name] = out
        new_velocity[name] = v
    return new_params, new_velocity


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    opt: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    opt.t += 1
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        opt.m[name] = beta1 * opt.m.get(name, 0.0) + (1 - beta1) * g
        opt.v[name] = beta2 * opt.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = opt.m[name] / (1 - beta1**opt.t)
        v_hat = opt.v[name] / (1 - beta2**opt.t)
        out[name] = Tensor(
            p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=p.requires_grad
        )
    return out


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _stratified_rounds(pool: np.ndarray, class_ids: np.ndarray, rng: np.random.Generator):
    """Batches with exactly one sample per class, avoiding duplicate-class
    false negatives in the in-batch contrastive loss."""
    classes = sorted(set(int(c) for c in class_ids[pool].tolist()))
    orders = {}
    for c in classes:
        members = pool[class_ids[pool] == c]
        orders[c] = members[rng.permutation(len(members))]
    rounds = min(len(v) for v in orders.values())
    for r in range(rounds):
        yield np.array([orders[c][r] for c in classes])


# -- contrastive pre-training ------------------------------------------------------


def contrastive_loss(
    state: DualEncoderState, images: np.ndarray, seqs: np.ndarray, inv_tau: Tensor | None = None
) -> Tensor:
    """Symmetric in-batch image/text contrastive loss (mean of both directions)."""
    img_emb, _ = encode_image_frozen(state, images)
    txt_emb = encode_text_frozen(state, seqs)
    if inv_tau is None:
        inv_tau = (-state.backbone["log_tau"]).exp()
    logits = matmul(img_emb, txt_emb.transpose((1, 0))) * inv_tau
    b = logits.shape[0]
    eye = Tensor(np.eye(b))
    nll_rows = (logsumexp(logits, axis=1) - (logits * eye).sum(axis=1)).mean()
    nll_cols = (logsumexp(logits, axis=0) - (logits * eye).sum(axis=0)).mean()
    return (nll_rows + nll_cols) * 0.5


@dataclass
class PretrainResult:
    state: DualEncoderState
    record: RunRecord
    checkpoint_path: Path | None


def pretrain(
    config: TrainConfig,
    dataset: Dataset,
    domains=None,
    pool: np.ndarray | None = None,
    out_dir: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> PretrainResult:
    """Train the backbone with the in-batch contrastive objective.

    ``domains`` restricts the training pool (defaults to all domains in
    the dataset); ``pool`` overrides it with explicit sample indices. The
    resulting backbone is frozen by every later stage.
    """
    if config.stage != "pretrain":
        raise ContractError("pretrain() requires a config with stage='pretrain'")
    t0 = time.time()
    state = DualEncoderState(
        config=config.encoder,
        backbone=init_backbone(config.encoder, config.seed),
        prompts=None,
        style_bank=None,
        style_layer=config.style_layer,
    )
    if pool is None:
        pool = dataset.indices(domains=domains)
    pool = np.asarray(pool)
    if len(pool) == 0:
        raise ContractError("empty pre-training pool")
    record = RunRecord(config=config.to_dict(), seed=config.seed)
    velocity: dict[str, np.ndarray] = {}
    opt = AdamState()
    global_step = 0
    for epoch in range(config.epochs):
        rng = rng_for(config.seed, "order", epoch)
        for batch_idx in _stratified_rounds(pool, dataset.class_ids, rng):
            images = dataset.images[batch_idx]
            seqs = class_token_batch(config.encoder, dataset.class_ids[batch_idx])
            state.zero_grads()
            loss = contrastive_loss(state, images, seqs)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite pre-training loss at step {global_step}", step=global_step)
            loss.backward()
            grads = {n: t.grad for n, t in state.backbone.items() if t.grad is not None}
            if config.optimizer == "adam":
                state.backbone = adam_step(state.backbone, grads, config.learning_rate, opt)
            else:
                state.backbone, velocity = sgd_step(
                    state.backbone, grads, config.learning_rate, config.momentum, velocity
                )
            record.steps.append(
                {
                    "step": global_step,
                    "seed": step_seed(config.seed, epoch, global_step),
                    "ce": value,
                    "cm": 0.0,
                    "feat": 0.0,
                    "diversity": 0.0,
                    "content": 0.0,
                    "total": value,
                }
            )
            global_step += 1
    record.final = {"steps": global_step, "last_loss": record.steps[-1]["total"] if record.steps else None}
    record.wall_clock_sec = time.time() - t0
    path = None
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        save_checkpoint(
            path,
            kind="backbone",
            config=config.encoder,
            tensors=state.backbone,
            groups={n: "backbone" for n in state.backbone},
            meta={
                "stage": "pretrain",
                "seed": config.seed,
                "train_config": config.to_dict(),
                "pool_domains": sorted(int(d) for d in set(dataset.domain_ids[pool].tolist())),
                "backbone_checksum": backbone_checksum(state.backbone),
            },
        )
    if out_dir is not None:
        record.write(out_dir)
    return PretrainResult(state=state, record=record, checkpoint_path=path)


# -- prompt tuning ------------------------------------------------------------------


@dataclass
class TuneResult:
    state: DualEncoderState
    record: RunRecord
    status: str  # "finished" | "interrupted"
    checkpoint_path: Path | None


def load_backbone(source) -> tuple[EncoderConfig, dict[str, Tensor], dict]:
    if isinstance(source, (str, Path)):
        kind, config, tensors, groups, meta = load_checkpoint(source)
        if kind not in ("backbone", "tuned"):
            raise CompatibilityError(f"checkpoint kind {kind!r} does not provide a backbone")
        backbone = {n: t for n, t in tensors.items() if groups[n] == "backbone"}
        return config, backbone, meta
    raise ContractError("load_backbone expects a checkpoint path")


def _split_to_meta(split: FewShotSplit) -> dict:
    return {
        "base_classes": split.base_classes.tolist(),
        "novel_classes": split.novel_classes.tolist(),
        "shots": int(split.shots),
        "train_idx": split.train_idx.tolist(),
        "test_base_idx": split.test_base_idx.tolist(),
        "test_novel_idx": split.test_novel_idx.tolist(),
        "source_domains": split.source_domains.tolist(),
        "seed": int(split.seed),
    }


def _split_from_meta(d: dict) -> FewShotSplit:
    return FewShotSplit(
        base_classes=np.array(d["base_classes"], dtype=np.int64),
        novel_classes=np.array(d["novel_classes"], dtype=np.int64),
        shots=d["shots"],
        train_idx=np.array(d["train_idx"], dtype=np.int64),
        test_base_idx=np.array(d["test_base_idx"], dtype=np.int64),
        test_novel_idx=np.array(d["test_novel_idx"], dtype=np.int64),
        source_domains=np.array(d["source_domains"], dtype=np.int64),
        seed=d["seed"],
    )


def _tuning_state(config: TrainConfig, backbone: dict[str, Tensor]) -> DualEncoderState:
    state = DualEncoderState(
        config=config.encoder,
        backbone=backbone,
        prompts=init_prompts(config.encoder, backbone, config.seed, depth=config.prompt_depth),
        style_bank=init_style_bank(config.n_style_bases, config.encoder.token_dim, config.seed),
        style_layer=config.style_layer,
    )
    state.set_backbone_trainable(False)
    return state


def _rebind_learnables(state: DualEncoderState, params: dict[str, Tensor]):
    for j in range(state.prompts.depth):
        state.prompts.text[j] = params[f"prompts.text.{j}"]
        state.prompts.vision[j] = params[f"prompts.vision.{j}"]
    state.style_bank.mu_raw = params["bank.mu_raw"]
    state.style_bank.sigma_raw = params["bank.sigma_raw"]


def prompt_tune(
    config: TrainConfig,
    backbone_source,
    split: FewShotSplit,
    dataset: Dataset,
    out_dir: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    _resume: dict | None = None,
) -> TuneResult:
    """Tune prompts and style bank on the split's base classes.

    The backbone stays frozen; a checksum guards against drift. With
    ``config.max_steps`` set, training stops there, checkpoints, and
    reports status "interrupted" for later ``resume()``.
    """
    if config.stage != "prompt_tune":
        raise ContractError("prompt_tune() requires a config with stage='prompt_tune'")
    if config.optimizer != "sgd":
        raise ContractError("prompt tuning uses the SGD optimizer")
    t0 = time.time()
    if isinstance(backbone_source, dict):
        backbone = backbone_source
        enc_config = config.encoder
    else:
        enc_config, backbone, _ = load_backbone(backbone_source)
        if enc_config.to_dict() != config.encoder.to_dict():
            raise CompatibilityError("checkpoint encoder config does not match train config")
    state = _tuning_state(config, backbone)
    checksum_before = backbone_checksum(state.backbone)

    class_ids = np.array(sorted(split.base_classes.tolist()))
    label_of = {c: i for i, c in enumerate(class_ids)}
    labels_all = np.array([label_of[c] for c in dataset.class_ids[split.train_idx]])
    effective_depth = saturated_prompt_depth(
        config.prompt_depth if config.prompt_depth is not None else config.encoder.prompt_depth,
        config.encoder.layers,
    )

    record = RunRecord(
        config=config.to_dict(),
        seed=config.seed,
        effective_prompt_depth=effective_depth,
    )
    velocity: dict[str, np.ndarray] = {}
    start_epoch = 0
    start_step = 0
    global_step = 0
    if _resume is not None:
        params = _resume["params"]
        _rebind_learnables(state, params)
        velocity = _resume["velocity"]
        start_epoch = _resume["epoch"]
        start_step = _resume["step_in_epoch"]
        global_step = _resume["global_step"]
        record.steps = list(_resume["steps"])

    # frozen text embeddings never change within a run; image activations
    # are cacheable only when the input image is not augmented
    seqs = class_token_batch(config.encoder, class_ids)
    frozen_text = encode_text_frozen(state, seqs).detach()
    frozen_image_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    n_train = len(split.train_idx)
    if n_train == 0:
        raise ContractError("empty tuning split")
    steps_per_epoch = int(np.ceil(n_train / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    interrupted = False

    def save_state(path):
        tensors = dict(state.backbone)
        groups = {n: "backbone" for n in state.backbone}
        for n, t in state.learnable_parameters().items():
            tensors[n] = t
            groups[n] = "learnable"
        for n, v in velocity.items():
            tensors[f"velocity.{n}"] = Tensor(v)
            groups[f"velocity.{n}"] = "optimizer"
        save_checkpoint(
            path,
            kind="tuned",
            config=config.encoder,
            tensors=tensors,
            groups=groups,
            meta={
                "stage": "prompt_tune",
                "seed": config.seed,
                "train_config": config.to_dict(),
                "split": _split_to_meta(split),
                "dataset_seed": int(dataset.seed),
                "progress": {
                    "epoch": epoch_done,
                    "step_in_epoch": step_done_in_epoch,
                    "global_step": global_step,
                    "finished": finished,
                },
                "steps": record.steps,
                "effective_prompt_depth": effective_depth,
                "backbone_checksum": checksum_before,
            },
        )

    epoch_done = start_epoch
    step_done_in_epoch = start_step
    finished = False
    stop = False
    for epoch in range(start_epoch, config.epochs):
        perm = rng_for(config.seed, "order", epoch).permutation(n_train)
        order = split.train_idx[perm]
        epoch_labels = labels_all[perm]
        for batch_pos, batch_idx in enumerate(_batches(np.arange(n_train), config.batch_size)):
            if epoch == start_epoch and batch_pos < start_step:
                continue
            sample_idx = order[batch_idx]
            images = dataset.images[sample_idx]
            if config.augmentation == "crop":
                rng = rng_for(config.seed, "aug", epoch, batch_pos)
                images = np.stack([random_crop(img, rng) for img in images])
            batch = TrainingBatch(
                images=images, labels=epoch_labels[batch_idx], class_ids=class_ids
            )
            frozen = _frozen_for_batch(
                state,
                images,
                sample_idx,
                frozen_text,
                frozen_image_cache,
                cacheable=(config.augmentation == "none"),
            )
            bd = total_loss(
                state, batch, config.weights, style_mode=config.style_mode, frozen=frozen
            )
            if not np.isfinite(bd.total):
                raise TrainingError(f"non-finite tuning loss at step {global_step}", step=global_step)
            learnables = state.learnable_parameters()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in learnables.items()}
            new_params, velocity = sgd_step(
                learnables, grads, config.learning_rate, config.momentum, velocity
            )
            _rebind_learnables(state, new_params)
            record.steps.append(
                {
                    "step": global_step,
                    "seed": step_seed(config.seed, epoch, batch_pos),
                    **bd.to_dict(),
                }
            )
            global_step += 1
            step_done_in_epoch = batch_pos + 1
            epoch_done = epoch
            if config.max_steps is not None and global_step >= config.max_steps and global_step < total_steps:
                interrupted = True
                stop = True
                break
        if stop:
            break
        step_done_in_epoch = 0
        epoch_done = epoch + 1
        if checkpoint_path is not None and (epoch + 1) % config.checkpoint_every == 0:
            finished = epoch + 1 == config.epochs
            save_state(checkpoint_path)

    finished = not interrupted
    checksum_after = backbone_checksum(state.backbone)
    if checksum_after != checksum_before:
        raise TrainingError("invariant violation: frozen backbone drifted during prompt tuning")
    record.final = {
        "steps": global_step,
        "last_total": record.steps[-1]["total"] if record.steps else None,
        "backbone_checksum": checksum_after,
        "status": "interrupted" if interrupted else "finished",
    }
    record.wall_clock_sec = time.time() - t0
    path = None
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        save_state(path)
    if out_dir is not None:
        record.write(out_dir)
    return TuneResult(
        state=state,
        record=record,
        status="interrupted" if interrupted else "finished",
        checkpoint_path=path,
    )


def _frozen_for_batch(
    state, images, sample_idx, text_emb, cache, cacheable
) -> FrozenOutputs:
    if cacheable:
        missing = [i for i, s in enumerate(sample_idx) if int(s) not in cache]
        if missing:
            emb, feats = encode_image_frozen(state, images[missing])
            for j, i in enumerate(missing):
                cache[int(sample_idx[i])] = (emb.data[j], feats[-1].data[j])
        img = np.stack([cache[int(s)][0] for s in sample_idx])
        fea = np.stack([cache[int(s)][1] for s in sample_idx])
        return FrozenOutputs(
            image_emb=Tensor(img), final_patch_feats=Tensor(fea), text_emb=text_emb
        )
    emb, feats = encode_image_frozen(state, images)
    return FrozenOutputs(
        image_emb=emb.detach(), final_patch_feats=feats[-1].detach(), text_emb=text_emb
    )


# -- resume -------------------------------------------------------------------------


def resume(
    checkpoint_path: str | Path,
    dataset: Dataset,
    out_dir: str | Path | None = None,
) -> TuneResult:
    """Continue an interrupted prompt-tuning run deterministically."""
    kind, enc_config, tensors, groups, meta = load_checkpoint(checkpoint_path)
    if kind != "tuned":
        raise CompatibilityError(f"cannot resume from a {kind!r} checkpoint")
    progress = meta["progress"]
    config = TrainConfig.from_dict(meta["train_config"])
    if int(dataset.seed) != int(meta["dataset_seed"]):
        raise ContractError(
            f"dataset seed {dataset.seed} does not match checkpoint dataset seed {meta['dataset_seed']}"
        )
    split = _split_from_meta(meta["split"])
    total_steps = config.epochs * int(
        np.ceil(len(split.train_idx) / config.batch_size)
    )
    if progress["finished"] or progress["global_step"] >= total_steps:
        print(f"resume: run already finished at step {progress['global_step']}; nothing to do")
        backbone = {n: t for n, t in tensors.items() if groups[n] == "backbone"}
        state = _tuning_state(config, backbone)
        learn = {n: t for n, t in tensors.items() if groups[n] == "learnable"}
        for t in learn.values():
            t.requires_grad = True
        _rebind_learnables(state, learn)
        record = RunRecord(
            config=config.to_dict(),
            seed=config.seed,
            steps=list(meta["steps"]),
            effective_prompt_depth=meta.get("effective_prompt_depth"),
        )
        record.final = {"steps": progress["global_step"], "status": "finished"}
        return TuneResult(state=state, record=record, status="finished", checkpoint_path=Path(checkpoint_path))

    backbone = {n: t for n, t in tensors.items() if groups[n] == "backbone"}
    learn = {n: t for n, t in tensors.items() if groups[n] == "learnable"}
    for t in learn.values():
        t.requires_grad = True
    velocity = {
        n[len("velocity.") :]: t.data for n, t in tensors.items() if groups[n] == "optimizer"
    }
    run_config = replace(config, max_steps=None)
    return prompt_tune(
        run_config,
        backbone,
        split,
        dataset,
        out_dir=out_dir,
        checkpoint_path=checkpoint_path,
        _resume={
            "params": learn,
            "velocity": velocity,
            "epoch": progress["epoch"],
            "step_in_epoch": progress["step_in_epoch"],
            "global_step": progress["global_step"],
            "steps": meta["steps"],
        },
    )
