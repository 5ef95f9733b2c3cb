"""Evaluation protocols: base-to-novel, domain generalization, ablations.

Evaluation always runs with prompts on (when present) and the style
shift off; it never mutates the checkpoint. Reported desk-scale numbers
should be averaged over several seeds by the caller; the sweep helper
emits one tidy row per (cell, seed).
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, DomainSplit, FewShotSplit
from .encoders import (
    DualEncoderState,
    class_token_batch,
    encode_image_frozen,
    encode_image_prompted,
    encode_text_frozen,
    encode_text_prompted,
    zero_shot_logits,
)
from .errors import ContractError
from .tensor import Tensor

EVAL_BATCH = 64


@contextmanager
def _inference(state: DualEncoderState):
    """Temporarily drop requires_grad so eval builds no graphs."""
    learnables = state.learnable_parameters()
    flags = {n: t.requires_grad for n, t in learnables.items()}
    try:
        for t in learnables.values():
            t.requires_grad = False
        yield
    finally:
        for n, t in learnables.items():
            t.requires_grad = flags[n]


def _encode_classes(state: DualEncoderState, class_ids, view: str) -> Tensor:
    seqs = class_token_batch(state.config, class_ids)
    if view == "prompted":
        return encode_text_prompted(state, seqs)
    return encode_text_frozen(state, seqs)


def _encode_images(state: DualEncoderState, images: np.ndarray, view: str) -> Tensor:
    if view == "prompted":
        emb, _ = encode_image_prompted(state, images, style_mode="off")
    else:
        emb, _ = encode_image_frozen(state, images)
    return emb


def default_view(state: DualEncoderState) -> str:
    return "prompted" if state.prompts is not None else "frozen"


def predict(
    state: DualEncoderState, images: np.ndarray, class_ids, view: str | None = None
) -> np.ndarray:
    """Top-1 predictions as positions into ``class_ids``."""
    view = view or default_view(state)
    with _inference(state):
        class_emb = _encode_classes(state, class_ids, view)
        out = []
        for start in range(0, len(images), EVAL_BATCH):
            emb = _encode_images(state, images[start : start + EVAL_BATCH], view)
            probs = zero_shot_logits(emb, class_emb, state.temperature())
            out.append(np.argmax(probs.data, axis=-1))
    return np.concatenate(out)


def accuracy(
    state: DualEncoderState,
    images: np.ndarray,
    labels: np.ndarray,
    class_ids,
    view: str | None = None,
) -> float:
    """Top-1 accuracy (percent) of zero-shot matching over ``class_ids``.

    ``labels`` are global class ids; they must all belong to the class set.
    """
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("accuracy over an empty sample set")
    class_ids = np.asarray(list(class_ids))
    pos = {int(c): i for i, c in enumerate(class_ids)}
    if any(int(l) not in pos for l in labels):
        raise ContractError("label outside the evaluated class set")
    want = np.array([pos[int(l)] for l in labels])
    got = predict(state, images, class_ids, view=view)
    return float(100.0 * np.mean(got == want))


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    if base_acc <= 0 or novel_acc <= 0:
        raise ContractError("harmonic mean requires positive accuracies")
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def alignment_mse(state: DualEncoderState, images: np.ndarray, class_ids) -> float:
    """Mean unweighted MSE between prompted and frozen embeddings
    (image branch over the samples, text branch over the class set)."""
    with _inference(state):
        total = 0.0
        for start in range(0, len(images), EVAL_BATCH):
            chunk = images[start : start + EVAL_BATCH]
            fe, _ = encode_image_frozen(state, chunk)
            pe, _ = encode_image_prompted(state, chunk, style_mode="off")
            total += float(((fe.data - pe.data) ** 2).mean(axis=-1).sum())
        img_mse = total / len(images)
        seqs = class_token_batch(state.config, class_ids)
        ft = encode_text_frozen(state, seqs)
        pt = encode_text_prompted(state, seqs)
        txt_mse = float(((ft.data - pt.data) ** 2).mean(axis=-1).mean())
    return img_mse + txt_mse


@dataclass
class EvalReport:
    protocol: str
    accuracies: dict[str, float]
    harmonic: float | None
    per_domain: dict[str, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in {**self.accuracies, **self.per_domain}.items():
            if not (0.0 <= v <= 100.0):
                raise ContractError(f"accuracy {k}={v} outside [0, 100]")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "accuracies": self.accuracies,
            "harmonic": self.harmonic,
            "per_domain": self.per_domain,
            "provenance": self.provenance,
        }

    def write(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def base_to_novel_eval(
    state: DualEncoderState, split: FewShotSplit, dataset: Dataset, provenance: dict | None = None
) -> EvalReport:
    """Accuracy on held-out base samples, zero-shot accuracy on novel
    classes, and their harmonic mean."""
    train_classes = set(dataset.class_ids[split.train_idx].tolist())
    leaked = train_classes & set(split.novel_classes.tolist())
    if leaked:
        raise ContractError(f"novel classes leaked into the train set: {sorted(leaked)}")
    base_acc = accuracy(
        state,
        dataset.images[split.test_base_idx],
        dataset.class_ids[split.test_base_idx],
        sorted(split.base_classes.tolist()),
    )
    novel_acc = accuracy(
        state,
        dataset.images[split.test_novel_idx],
        dataset.class_ids[split.test_novel_idx],
        sorted(split.novel_classes.tolist()),
    )
    return EvalReport(
        protocol="base_to_novel",
        accuracies={"base": base_acc, "novel": novel_acc},
        harmonic=harmonic_mean(base_acc, novel_acc) if min(base_acc, novel_acc) > 0 else None,
        provenance=provenance or {},
    )


def domain_gen_eval(
    state: DualEncoderState, split: DomainSplit, dataset: Dataset, provenance: dict | None = None
) -> EvalReport:
    """Per-target-domain accuracy on the trained class set, plus source
    test accuracy and the target average."""
    class_set = sorted(split.classes.tolist())
    per_domain = {}
    for dom, idx in sorted(split.test_target_idx.items()):
        per_domain[f"target_{dom}"] = accuracy(
            state, dataset.images[idx], dataset.class_ids[idx], class_set
        )
    source_acc = accuracy(
        state,
        dataset.images[split.test_source_idx],
        dataset.class_ids[split.test_source_idx],
        class_set,
    )
    target_avg = float(np.mean(list(per_domain.values())))
    return EvalReport(
        protocol="domain_generalization",
        accuracies={"source": source_acc, "target_avg": target_avg},
        harmonic=None,
        per_domain=per_domain,
        provenance=provenance or {},
    )


# -- ablation sweeps ---------------------------------------------------------------

LOSS_TERM_CELLS = ("none", "feat", "feat+cm", "feat+cm+content", "full")
N_BASES_GRID = (1, 4, 8, 12, 16, 24)
AUGMENTATION_CELLS = ("off", "crop", "style")


def _config_for_cell(axis: str, cell, base_config):
    from dataclasses import replace

    from .losses import LossWeights

    w = base_config.weights
    if axis == "loss-terms":
        table = {
            "none": (0.0, 0.0, 0.0, 0.0, "off"),
            "feat": (w.lambda_f, w.lambda_g, 0.0, 0.0, "off"),
            "feat+cm": (w.lambda_f, w.lambda_g, 0.0, 0.0, "off", 1.0),
            "feat+cm+content": (w.lambda_f, w.lambda_g, 0.0, w.lambda_content, "shift", 1.0),
            "full": (w.lambda_f, w.lambda_g, w.lambda_div, w.lambda_content, "shift", 1.0),
        }
        if cell not in table:
            raise ContractError(f"unknown loss-terms cell {cell!r}")
        row = table[cell]
        lf, lg, ld, lc, style = row[:5]
        lcm = row[5] if len(row) > 5 else 0.0
        weights = LossWeights(
            lambda_f=lf, lambda_g=lg, lambda_div=ld, lambda_content=lc, lambda_cm=lcm, tau=w.tau
        )
        return replace(base_config, weights=weights, style_mode=style)
    if axis == "style-layer":
        layer = int(cell)
        if not (1 <= layer < base_config.encoder.layers):
            raise ContractError(f"style layer {layer} outside [1, {base_config.encoder.layers - 1}]")
        return replace(base_config, style_layer=layer)
    if axis == "n-bases":
        n = int(cell)
        if n < 1:
            raise ContractError("n-bases must be >= 1")
        return replace(base_config, n_style_bases=n)
    if axis == "augmentation":
        base_weights = LossWeights(
            lambda_f=w.lambda_f, lambda_g=w.lambda_g, lambda_div=0.0, lambda_content=0.0,
            lambda_cm=1.0, tau=w.tau,
        )
        if cell == "off":
            return replace(base_config, weights=base_weights, style_mode="off", augmentation="none")
        if cell == "crop":
            return replace(base_config, weights=base_weights, style_mode="off", augmentation="crop")
        if cell == "style":
            return replace(base_config, style_mode="shift", augmentation="none")
        raise ContractError(f"unknown augmentation cell {cell!r}")
    raise ContractError(f"unknown ablation axis {axis!r}")


def ablation_sweep(
    axis: str,
    grid,
    seeds,
    base_config,
    backbone_source,
    dataset: Dataset,
    split: FewShotSplit,
    domain_split: DomainSplit | None = None,
    out_path: str | Path | None = None,
) -> list[dict]:
    """One full train+eval per (cell, seed); returns tidy rows and appends
    each completed cell to ``out_path`` (CSV) as it lands."""
    from dataclasses import replace

    from .train import prompt_tune

    grid = list(grid)
    if not grid:
        raise ContractError("ablation grid is empty")
    rows: list[dict] = []
    writer = None
    fh = None
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(out_path, "w", newline="")
    try:
        for cell in grid:
            for seed in seeds:
                config = replace(_config_for_cell(axis, cell, base_config), seed=int(seed))
                result = prompt_tune(config, backbone_source, split, dataset)
                report = base_to_novel_eval(result.state, split, dataset)
                row = {
                    "axis": axis,
                    "cell": str(cell),
                    "seed": int(seed),
                    "base": report.accuracies["base"],
                    "novel": report.accuracies["novel"],
                    "harmonic": report.harmonic,
                }
                if domain_split is not None:
                    dg = domain_gen_eval(result.state, domain_split, dataset)
                    row["target_avg"] = dg.accuracies["target_avg"]
                    row["source"] = dg.accuracies["source"]
                rows.append(row)
                if fh is not None:
                    if writer is None:
                        writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
                        writer.writeheader()
                    writer.writerow(row)
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return rows
