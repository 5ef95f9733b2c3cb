"""Miniature dual encoder: patch-based vision transformer + token text transformer.

Both encoders share one backbone parameter set and expose two views:

* a plain view (no prompt tokens) used for zero-shot inference and as the
  frozen teacher during prompt tuning, and
* a prompted view with learnable prompt tokens injected at the first J
  layers (deep prompting: each of those layers drops the previous prompt
  outputs and concatenates fresh prompts), plus an optional style-shift
  hook on the patch tokens after a configured layer.

Prompt tokens carry no positional embedding and real tokens keep their
plain-view positions, so when the test harness masks prompts out of
attention the prompted view computes bit-for-bit the plain view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericDomainError, VocabularyError
from .seeding import rng_for
from .style import StyleBank, style_shift_batch
from .tensor import Tensor, concat, embedding, gelu, l2_normalize, matmul, softmax

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
TEMPLATE_TOKEN_IDS = (3, 4, 5, 6)
FIRST_CLASS_TOKEN_ID = 7

LN_EPSILON = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    patch_grid: int = 4
    image_size: int = 24
    channels: int = 3
    token_dim: int = 32
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    vocab_size: int = 32
    max_text_length: int = 16
    temperature: float = 0.07
    prompt_depth: int = 3
    vision_prompts: int = 4
    text_prompts: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if not (1 <= self.prompt_depth <= self.layers):
            raise ConfigurationError(
                f"prompt_depth must be in [1, layers]; got {self.prompt_depth} with {self.layers} layers"
            )
        if self.token_dim % self.heads != 0:
            raise ConfigurationError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.image_size % self.patch_grid != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_grid {self.patch_grid}"
            )
        if self.vocab_size < FIRST_CLASS_TOKEN_ID + 1:
            raise ConfigurationError("vocab_size too small for specials plus one class")

    @property
    def n_patches(self) -> int:
        return self.patch_grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * (self.image_size // self.patch_grid) ** 2

    @property
    def max_classes(self) -> int:
        return self.vocab_size - FIRST_CLASS_TOKEN_ID

    def to_dict(self) -> dict:
        return {
            "patch_grid": self.patch_grid,
            "image_size": self.image_size,
            "channels": self.channels,
            "token_dim": self.token_dim,
            "layers": self.layers,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "vocab_size": self.vocab_size,
            "max_text_length": self.max_text_length,
            "temperature": self.temperature,
            "prompt_depth": self.prompt_depth,
            "vision_prompts": self.vision_prompts,
            "text_prompts": self.text_prompts,
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


def saturated_prompt_depth(requested: int, layers: int) -> int:
    """Deep-prompting depth actually usable at this layer count."""
    return max(1, min(requested, layers))


# -- parameter initialization -------------------------------------------------


def init_backbone(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Fresh backbone weights; draw order is fixed so seeds reproduce bytes."""
    rng = rng_for(seed, "backbone")
    d = config.token_dim
    params: dict[str, Tensor] = {}

    def normal(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    for branch, n_pos in (("v", config.n_patches + 1), ("t", config.max_text_length)):
        if branch == "v":
            normal("v.patch_w", (config.patch_dim, d), std=config.patch_dim**-0.5)
            zeros("v.patch_b", (d,))
            normal("v.cls", (d,), std=0.02)
        else:
            normal("t.embed", (config.vocab_size, d), std=0.02)
        normal(f"{branch}.pos", (n_pos, d), std=0.01)
        for l in range(config.layers):
            pre = f"{branch}.blocks.{l}"
            ones(f"{pre}.ln1.g", (d,))
            zeros(f"{pre}.ln1.b", (d,))
            for w in ("wq", "wk", "wv", "wo"):
                normal(f"{pre}.{w}", (d, d), std=d**-0.5)
            for b in ("bq", "bk", "bv", "bo"):
                zeros(f"{pre}.{b}", (d,))
            ones(f"{pre}.ln2.g", (d,))
            zeros(f"{pre}.ln2.b", (d,))
            hidden = int(d * config.mlp_ratio)
            normal(f"{pre}.mlp_w1", (d, hidden), std=d**-0.5)
            zeros(f"{pre}.mlp_b1", (hidden,))
            normal(f"{pre}.mlp_w2", (hidden, d), std=hidden**-0.5)
            zeros(f"{pre}.mlp_b2", (d,))
        ones(f"{branch}.ln_f.g", (d,))
        zeros(f"{branch}.ln_f.b", (d,))
        normal(f"{branch}.proj", (d, config.embed_dim), std=d**-0.5)
    params["log_tau"] = Tensor(np.array([np.log(config.temperature)]), requires_grad=True)
    return params


@dataclass
class PromptSet:
    """Per-layer learnable prompts for deep prompting (J layers deep)."""

    text: list[Tensor] = field(default_factory=list)  # J tensors of shape (T, D)
    vision: list[Tensor] = field(default_factory=list)  # J tensors of shape (V, D)

    @property
    def depth(self) -> int:
        return len(self.text)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, t in enumerate(self.text):
            out[f"prompts.text.{j}"] = t
        for j, v in enumerate(self.vision):
            out[f"prompts.vision.{j}"] = v
        return out


def init_prompts(
    config: EncoderConfig, backbone: dict[str, Tensor], seed: int, depth: int | None = None
) -> PromptSet:
    """Normal init everywhere except first-layer text prompts, which copy
    the template token embeddings (the synthetic "a photo of a")."""
    rng = rng_for(seed, "prompts")
    j = saturated_prompt_depth(depth if depth is not None else config.prompt_depth, config.layers)
    d = config.token_dim
    text: list[Tensor] = []
    vision: list[Tensor] = []
    template = backbone["t.embed"].data[list(TEMPLATE_TOKEN_IDS)]
    for layer in range(j):
        if layer == 0:
            init = np.array(template[: config.text_prompts])
            if init.shape[0] < config.text_prompts:
                extra = rng.normal(0.0, 0.02, size=(config.text_prompts - init.shape[0], d))
                init = np.concatenate([init, extra], axis=0)
            text.append(Tensor(init, requires_grad=True))
        else:
            text.append(Tensor(rng.normal(0.0, 0.02, size=(config.text_prompts, d)), requires_grad=True))
        vision.append(Tensor(rng.normal(0.0, 0.02, size=(config.vision_prompts, d)), requires_grad=True))
    return PromptSet(text=text, vision=vision)


def zero_prompts(config: EncoderConfig, depth: int | None = None) -> PromptSet:
    j = saturated_prompt_depth(depth if depth is not None else config.prompt_depth, config.layers)
    d = config.token_dim
    return PromptSet(
        text=[Tensor(np.zeros((config.text_prompts, d)), requires_grad=True) for _ in range(j)],
        vision=[Tensor(np.zeros((config.vision_prompts, d)), requires_grad=True) for _ in range(j)],
    )


@dataclass
class DualEncoderState:
    """Backbone weights plus (optionally) prompts, style bank, and the
    style-shift hook position. The same backbone serves both views."""

    config: EncoderConfig
    backbone: dict[str, Tensor]
    prompts: PromptSet | None = None
    style_bank: StyleBank | None = None
    style_layer: int = 2
    style_epsilon: float = 1e-5

    def __post_init__(self):
        if self.style_layer >= self.config.layers:
            raise ConfigurationError(
                f"style layer {self.style_layer} out of range for {self.config.layers} layers"
            )
        if self.style_layer < 1:
            raise ConfigurationError("style layer index starts at 1")

    def temperature(self) -> float:
        return float(np.exp(self.backbone["log_tau"].data[0]))

    def set_backbone_trainable(self, trainable: bool):
        for t in self.backbone.values():
            t.requires_grad = trainable

    def learnable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.prompts is not None:
            out.update(self.prompts.parameters())
        if self.style_bank is not None:
            out.update(self.style_bank.parameters())
        return out

    def zero_grads(self):
        for t in self.backbone.values():
            t.zero_grad()
        for t in self.learnable_parameters().values():
            t.zero_grad()


# -- forward pieces ------------------------------------------------------------


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) * (x - mu)).mean(axis=-1, keepdims=True)
    return (x - mu) / (var + LN_EPSILON).sqrt() * g + b


def _attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, kv_slice: slice | None):
    b, t, d = x.shape
    hd = d // heads
    kv = x if kv_slice is None else x[:, kv_slice, :]
    tk = kv.shape[1]
    q = matmul(x, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
    k = matmul(kv, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
    v = matmul(kv, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]
    q = q.reshape(b, t, heads, hd).transpose((0, 2, 1, 3))
    k = k.reshape(b, tk, heads, hd).transpose((0, 2, 3, 1))
    v = v.reshape(b, tk, heads, hd).transpose((0, 2, 1, 3))
    scores = matmul(q, k) * (hd**-0.5)
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v).transpose((0, 2, 1, 3)).reshape(b, t, d)
    return matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]


def _block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, kv_slice: slice | None):
    h = _layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = x + _attention(h, p, prefix, heads, kv_slice)
    h = _layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = gelu(matmul(h, p[f"{prefix}.mlp_w1"]) + p[f"{prefix}.mlp_b1"])
    x = x + matmul(h, p[f"{prefix}.mlp_w2"]) + p[f"{prefix}.mlp_b2"]
    return x


def _patchify(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    b = images.shape[0]
    g = config.patch_grid
    ps = config.image_size // g
    x = images.reshape(b, config.channels, g, ps, g, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, g, g, C, ps, ps), row-major over the grid
    return x.reshape(b, g * g, config.patch_dim)


def _check_images(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(
            f"image batch shape {images.shape} does not match configured {('B',) + expected}"
        )
    return images


def encode_image_frozen(state: DualEncoderState, images: np.ndarray):
    """Plain-view image encoding.

    Returns (embeddings (B, d) L2-normalized, per-layer patch features:
    list of L tensors (B, P^2, D), CLS excluded).
    """
    config = state.config
    p = state.backbone
    images = _check_images(images, config)
    b = images.shape[0]
    tok = matmul(Tensor(_patchify(images, config)), p["v.patch_w"]) + p["v.patch_b"]
    cls = p["v.cls"].reshape(1, 1, config.token_dim).broadcast_to((b, 1, config.token_dim))
    x = concat([cls, tok], axis=1) + p["v.pos"]
    feats = []
    for l in range(config.layers):
        x = _block(x, p, f"v.blocks.{l}", config.heads, None)
        feats.append(x[:, 1:, :])
    head = _layer_norm(x[:, 0, :], p["v.ln_f.g"], p["v.ln_f.b"])
    emb = l2_normalize(matmul(head, p["v.proj"]), axis=-1)
    return emb, feats


def encode_image_prompted(
    state: DualEncoderState,
    images: np.ndarray,
    style_mode: str = "off",
    mask_prompts: bool = False,
):
    """Prompted-view image encoding with optional style shift.

    ``style_mode`` is "off" or "shift"; the shift consults the style bank
    after layer ``state.style_layer`` and touches only patch tokens.
    ``mask_prompts`` is a test harness: prompt tokens are excluded from
    every attention key/value set, which makes the real-token stream
    identical to the plain view.
    """
    config = state.config
    if state.prompts is None:
        raise ConfigurationError("prompted encoding requires a PromptSet on the state")
    if style_mode not in ("off", "shift"):
        raise ConfigurationError(f"unknown style_mode {style_mode!r}")
    if style_mode == "shift" and state.style_bank is None:
        raise ConfigurationError("style_mode 'shift' requires a style bank")
    p = state.backbone
    prompts = state.prompts
    images = _check_images(images, config)
    b = images.shape[0]
    nv = config.vision_prompts
    d = config.token_dim
    kv_slice = slice(nv, None) if mask_prompts else None

    tok = matmul(Tensor(_patchify(images, config)), p["v.patch_w"]) + p["v.patch_b"]
    cls = p["v.cls"].reshape(1, 1, d).broadcast_to((b, 1, d))
    real = concat([cls, tok], axis=1) + p["v.pos"]
    x = concat([prompts.vision[0].reshape(1, nv, d).broadcast_to((b, nv, d)), real], axis=1)
    feats = []
    for l in range(config.layers):
        if 0 < l < prompts.depth:
            fresh = prompts.vision[l].reshape(1, nv, d).broadcast_to((b, nv, d))
            x = concat([fresh, x[:, nv:, :]], axis=1)
        x = _block(x, p, f"v.blocks.{l}", config.heads, kv_slice)
        if style_mode == "shift" and l + 1 == state.style_layer:
            shifted = style_shift_batch(x[:, nv + 1 :, :], state.style_bank, state.style_epsilon)
            x = concat([x[:, : nv + 1, :], shifted], axis=1)
        feats.append(x[:, nv + 1 :, :])
    head = _layer_norm(x[:, nv, :], p["v.ln_f.g"], p["v.ln_f.b"])
    emb = l2_normalize(matmul(head, p["v.proj"]), axis=-1)
    return emb, feats


def _check_sequences(seqs: np.ndarray, config: EncoderConfig) -> np.ndarray:
    seqs = np.asarray(seqs)
    if seqs.ndim == 1:
        seqs = seqs[None]
    if seqs.ndim != 2:
        raise DimensionError(f"token sequences must be (B, L), got {seqs.shape}")
    if seqs.shape[1] > config.max_text_length:
        raise DimensionError(
            f"sequence length {seqs.shape[1]} exceeds max_text_length {config.max_text_length}"
        )
    if seqs.min() < 0 or seqs.max() >= config.vocab_size:
        bad = int(seqs.min()) if seqs.min() < 0 else int(seqs.max())
        raise VocabularyError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    if not (seqs[:, 0] == SOS_ID).all() or not (seqs[:, -1] == EOS_ID).all():
        raise VocabularyError("sequences must start with SOS and end with EOS")
    return seqs


def encode_text_frozen(state: DualEncoderState, seqs: np.ndarray) -> Tensor:
    """Plain-view text encoding; returns (B, d) L2-normalized EOS embeddings."""
    config = state.config
    p = state.backbone
    seqs = _check_sequences(seqs, config)
    n = seqs.shape[1]
    x = embedding(p["t.embed"], seqs) + p["t.pos"][:n, :]
    for l in range(config.layers):
        x = _block(x, p, f"t.blocks.{l}", config.heads, None)
    head = _layer_norm(x[:, n - 1, :], p["t.ln_f.g"], p["t.ln_f.b"])
    return l2_normalize(matmul(head, p["t.proj"]), axis=-1)


def encode_text_prompted(
    state: DualEncoderState, seqs: np.ndarray, mask_prompts: bool = False
) -> Tensor:
    """Prompted-view text encoding; prompts sit between SOS and the template."""
    config = state.config
    if state.prompts is None:
        raise ConfigurationError("prompted encoding requires a PromptSet on the state")
    p = state.backbone
    prompts = state.prompts
    seqs = _check_sequences(seqs, config)
    b, n = seqs.shape
    nt = config.text_prompts
    d = config.token_dim
    emb = embedding(p["t.embed"], seqs) + p["t.pos"][:n, :]
    first = prompts.text[0].reshape(1, nt, d).broadcast_to((b, nt, d))
    x = concat([emb[:, :1, :], first, emb[:, 1:, :]], axis=1)
    for l in range(config.layers):
        if 0 < l < prompts.depth:
            fresh = prompts.text[l].reshape(1, nt, d).broadcast_to((b, nt, d))
            x = concat([x[:, :1, :], fresh, x[:, 1 + nt :, :]], axis=1)
        if mask_prompts:
            x = _block_split_kv(x, p, f"t.blocks.{l}", config.heads, nt)
        else:
            x = _block(x, p, f"t.blocks.{l}", config.heads, None)
    head = _layer_norm(x[:, nt + n - 1, :], p["t.ln_f.g"], p["t.ln_f.b"])
    return l2_normalize(matmul(head, p["t.proj"]), axis=-1)


def _block_split_kv(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int, nt: int):
    """Transformer block whose attention keys/values skip the prompt rows
    (text prompts occupy rows 1 .. nt)."""
    b, t, d = x.shape
    hd = d // heads
    h = _layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    kv = concat([h[:, :1, :], h[:, 1 + nt :, :]], axis=1)
    tk = kv.shape[1]
    q = matmul(h, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
    k = matmul(kv, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
    v = matmul(kv, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]
    q = q.reshape(b, t, heads, hd).transpose((0, 2, 1, 3))
    k = k.reshape(b, tk, heads, hd).transpose((0, 2, 3, 1))
    v = v.reshape(b, tk, heads, hd).transpose((0, 2, 1, 3))
    attn = softmax(matmul(q, k) * (hd**-0.5), axis=-1)
    out = matmul(attn, v).transpose((0, 2, 1, 3)).reshape(b, t, d)
    x = x + matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]
    h = _layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = gelu(matmul(h, p[f"{prefix}.mlp_w1"]) + p[f"{prefix}.mlp_b1"])
    return x + matmul(h, p[f"{prefix}.mlp_w2"]) + p[f"{prefix}.mlp_b2"]


# -- matching rule --------------------------------------------------------------


def zero_shot_logits(image_emb: Tensor, class_embs: Tensor, tau: float) -> Tensor:
    """Class probabilities: softmax over cosine similarities at temperature tau.

    Inputs must already be L2-normalized (the encoders guarantee this).
    """
    if tau <= 0:
        raise NumericDomainError(f"temperature must be positive, got {tau}")
    if image_emb.shape[-1] != class_embs.shape[-1]:
        raise DimensionError(
            f"embedding dims disagree: {image_emb.shape} vs {class_embs.shape}"
        )
    if np.any(np.linalg.norm(class_embs.data, axis=-1) == 0.0) or np.any(
        np.linalg.norm(image_emb.data, axis=-1) == 0.0
    ):
        raise NumericDomainError("zero-norm embedding in zero-shot matching")
    single = image_emb.ndim == 1
    img = image_emb.reshape(1, -1) if single else image_emb
    sims = matmul(img, class_embs.transpose((1, 0)))
    probs = softmax(sims * (1.0 / tau), axis=-1)
    return probs.reshape(class_embs.shape[0]) if single else probs


# -- token sequences -------------------------------------------------------------


def class_token_sequence(config: EncoderConfig, class_id: int) -> np.ndarray:
    """SOS + 4-token template + class token + EOS."""
    token = FIRST_CLASS_TOKEN_ID + int(class_id)
    if not (FIRST_CLASS_TOKEN_ID <= token < config.vocab_size):
        raise VocabularyError(
            f"class id {class_id} maps to token {token} outside vocabulary {config.vocab_size}"
        )
    return np.array([SOS_ID, *TEMPLATE_TOKEN_IDS, token, EOS_ID], dtype=np.int64)


def class_token_batch(config: EncoderConfig, class_ids) -> np.ndarray:
    return np.stack([class_token_sequence(config, c) for c in class_ids])


def make_state(
    config: EncoderConfig,
    seed: int,
    with_prompts: bool = True,
    n_style_bases: int = 12,
    style_layer: int = 2,
    prompt_depth: int | None = None,
) -> DualEncoderState:
    """Convenience constructor used by tests and demos: fresh backbone plus
    optional prompts and bank, all from independent streams of ``seed``."""
    from .style import init_style_bank

    backbone = init_backbone(config, seed)
    prompts = init_prompts(config, backbone, seed, depth=prompt_depth) if with_prompts else None
    bank = init_style_bank(n_style_bases, config.token_dim, seed) if with_prompts else None
    return DualEncoderState(
        config=config,
        backbone=backbone,
        prompts=prompts,
        style_bank=bank,
        style_layer=style_layer,
    )
