"""Procedural multi-domain image generator and few-shot splits.

Domains differ only in style: per-channel color statistics, a texture
frequency band, and a noise fraction. Classes differ only in content: a
parametric binary shape mask drawn from a fixed family. Content is
therefore domain-invariant by construction, which is exactly the setting
the style-shift mechanism targets.

Each pixel is mu_c + sigma_c * (sqrt(1 - eta^2) * S + eta * noise) where
S is the per-image standardized structure (texture plus shape) shared by
all channels, so empirical per-domain channel statistics land on the
DomainSpec targets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError
from .seeding import rng_for
from .tensor import Tensor, load_tensor, save_tensor

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

TEXTURE_AMPLITUDE = 0.6
SHAPE_AMPLITUDE = 1.2

SHAPE_FAMILY = (
    "bars",
    "disk",
    "cross",
    "ring",
    "checker",
    "wedge",
    "frame",
    "diag",
    "dots",
    "halfmoon",
    "tri_bars",
    "x_cross",
    "corner",
    "stripe_h",
    "target",
    "zigzag",
)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    color_mean: tuple[float, float, float]
    color_std: tuple[float, float, float]
    freq_band: tuple[float, float]  # cycles per image
    noise: float  # fraction of channel std carried by iid noise
    seed: int = 0

    def __post_init__(self):
        if min(self.color_std) <= 0:
            raise ContractError(f"domain {self.domain_id}: color stds must be positive")
        if not (0.0 <= self.noise < 1.0):
            raise ContractError(f"domain {self.domain_id}: noise fraction outside [0, 1)")

    def to_dict(self):
        return {
            "domain_id": self.domain_id,
            "color_mean": list(self.color_mean),
            "color_std": list(self.color_std),
            "freq_band": list(self.freq_band),
            "noise": self.noise,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d):
        return DomainSpec(
            domain_id=d["domain_id"],
            color_mean=tuple(d["color_mean"]),
            color_std=tuple(d["color_std"]),
            freq_band=tuple(d["freq_band"]),
            noise=d["noise"],
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    scale_jitter: tuple[float, float] = (0.65, 1.3)
    position_jitter: float = 0.2  # of image size

    def __post_init__(self):
        if self.shape not in SHAPE_FAMILY:
            raise ContractError(f"unknown shape program {self.shape!r}")

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "shape": self.shape,
            "scale_jitter": list(self.scale_jitter),
            "position_jitter": self.position_jitter,
        }

    @staticmethod
    def from_dict(d):
        return ClassSpec(
            class_id=d["class_id"],
            shape=d["shape"],
            scale_jitter=tuple(d["scale_jitter"]),
            position_jitter=d["position_jitter"],
        )


def default_domain_specs(n: int = 4) -> list[DomainSpec]:
    """Two moderate source domains followed by strongly shifted targets."""
    table = [
        DomainSpec(0, (0.10, 0.00, -0.10), (0.90, 1.00, 1.10), (1.0, 3.0), 0.25),
        DomainSpec(1, (-0.20, 0.15, 0.20), (1.10, 0.80, 0.90), (2.0, 4.0), 0.25),
        DomainSpec(2, (1.20, -0.90, 0.60), (1.90, 0.45, 1.50), (5.0, 8.0), 0.35),
        DomainSpec(3, (-1.00, 1.10, -0.70), (0.40, 1.70, 0.55), (4.0, 7.0), 0.40),
        DomainSpec(4, (0.70, 0.70, -1.10), (1.40, 1.40, 0.50), (6.0, 9.0), 0.45),
        DomainSpec(5, (-0.80, -0.60, 0.90), (0.55, 0.60, 1.60), (3.0, 6.0), 0.30),
    ]
    if n > len(table):
        raise ContractError(f"at most {len(table)} default domains available")
    return table[:n]


def default_class_specs(n: int = 8) -> list[ClassSpec]:
    if n > len(SHAPE_FAMILY):
        raise ContractError(f"at most {len(SHAPE_FAMILY)} default classes available")
    return [ClassSpec(class_id=i, shape=SHAPE_FAMILY[i]) for i in range(n)]


# -- shape programs --------------------------------------------------------------


def shape_mask(shape: str, size: int, scale: float, cx: float, cy: float) -> np.ndarray:
    """Binary (size, size) mask for one shape program instance."""
    y, x = np.mgrid[0:size, 0:size].astype(float)
    x = (x - cx) / size
    y = (y - cy) / size
    r = np.hypot(x, y)
    s = scale
    if shape == "bars":
        return ((np.floor((x / s + 10.0) * 4.0)) % 2 == 0).astype(float)
    if shape == "disk":
        return (r < 0.28 * s).astype(float)
    if shape == "cross":
        return ((np.abs(x) < 0.08 * s) | (np.abs(y) < 0.08 * s)).astype(float)
    if shape == "ring":
        return ((r > 0.18 * s) & (r < 0.32 * s)).astype(float)
    if shape == "checker":
        return ((np.floor((x / s + 10.0) * 3.0) + np.floor((y / s + 10.0) * 3.0)) % 2 == 0).astype(float)
    if shape == "wedge":
        return ((y > 0) & (np.abs(x) < y * 0.9) & (y < 0.42 * s)).astype(float)
    if shape == "frame":
        box = np.maximum(np.abs(x), np.abs(y))
        return ((box > 0.22 * s) & (box < 0.36 * s)).astype(float)
    if shape == "diag":
        return ((np.floor(((x + y) / s + 10.0) * 4.0)) % 2 == 0).astype(float)
    if shape == "dots":
        gx = (x / s + 10.0) * 5.0
        gy = (y / s + 10.0) * 5.0
        return (np.hypot(gx - np.round(gx), gy - np.round(gy)) < 0.28).astype(float)
    if shape == "halfmoon":
        return ((r < 0.30 * s) & (x > 0.04 * s)).astype(float)
    if shape == "tri_bars":
        return ((np.floor((y / s + 10.0) * 6.0)) % 3 == 0).astype(float)
    if shape == "x_cross":
        return ((np.abs(x - y) < 0.09 * s) | (np.abs(x + y) < 0.09 * s)).astype(float)
    if shape == "corner":
        return ((x > 0.02 * s) & (y > 0.02 * s) & (np.maximum(x, y) < 0.38 * s)).astype(float)
    if shape == "stripe_h":
        return ((np.floor((y / s + 10.0) * 4.0)) % 2 == 0).astype(float)
    if shape == "target":
        return (((r < 0.12 * s) | ((r > 0.22 * s) & (r < 0.32 * s)))).astype(float)
    if shape == "zigzag":
        return (np.abs(((x / s * 4.0) % 1.0) - 0.5) * 0.5 > np.abs(y / s + 0.0) - 0.25).astype(float)
    raise ContractError(f"unknown shape program {shape!r}")


def render_sample(
    domain: DomainSpec, cls: ClassSpec, size: int, rng: np.random.Generator
) -> np.ndarray:
    """One (3, size, size) image combining domain style and class content."""
    scale = rng.uniform(*cls.scale_jitter)
    jit = cls.position_jitter * size
    cx = size / 2.0 + rng.uniform(-jit, jit)
    cy = size / 2.0 + rng.uniform(-jit, jit)
    mask = shape_mask(cls.shape, size, scale, cx, cy)

    fx = rng.uniform(*domain.freq_band)
    fy = rng.uniform(*domain.freq_band)
    phix, phiy = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    texture = np.sin(2 * np.pi * fx * xx / size + phix) * np.sin(2 * np.pi * fy * yy / size + phiy)

    structure = TEXTURE_AMPLITUDE * texture + SHAPE_AMPLITUDE * (mask - 0.5)
    structure = (structure - structure.mean()) / max(structure.std(), 1e-9)

    eta = domain.noise
    carrier = np.sqrt(1.0 - eta * eta)
    out = np.empty((3, size, size))
    for c in range(3):
        noise = rng.standard_normal((size, size))
        out[c] = domain.color_mean[c] + domain.color_std[c] * (carrier * structure + eta * noise)
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    class_ids: np.ndarray  # (N,)
    domain_ids: np.ndarray  # (N,)
    domains: list[DomainSpec]
    classes: list[ClassSpec]
    seed: int
    samples_per_class_per_domain: int = 0
    image_size: int = field(default=24)

    def __len__(self):
        return len(self.images)

    @property
    def domain_id_list(self):
        return [d.domain_id for d in self.domains]

    @property
    def class_id_list(self):
        return [c.class_id for c in self.classes]

    def indices(self, domains=None, classes=None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if domains is not None:
            mask &= np.isin(self.domain_ids, list(domains))
        if classes is not None:
            mask &= np.isin(self.class_ids, list(classes))
        return np.nonzero(mask)[0]


def generate_dataset(
    domains: list[DomainSpec],
    classes: list[ClassSpec],
    samples_per_class_per_domain: int,
    seed: int,
    image_size: int = 24,
) -> Dataset:
    if len(domains) < 2:
        raise ContractError("need at least 2 domains")
    if len(classes) < 4:
        raise ContractError("need at least 4 classes")
    if samples_per_class_per_domain < 1:
        raise ContractError("samples_per_class_per_domain must be >= 1")
    shapes = [c.shape for c in classes]
    if len(set(shapes)) != len(shapes):
        raise ContractError("shape programs must be pairwise distinct")

    images, class_ids, domain_ids = [], [], []
    for dom in domains:
        for cls in classes:
            for k in range(samples_per_class_per_domain):
                rng = rng_for(seed, "sample", dom.seed, dom.domain_id, cls.class_id, k)
                images.append(render_sample(dom, cls, image_size, rng))
                class_ids.append(cls.class_id)
                domain_ids.append(dom.domain_id)
    return Dataset(
        images=np.stack(images),
        class_ids=np.array(class_ids, dtype=np.int64),
        domain_ids=np.array(domain_ids, dtype=np.int64),
        domains=list(domains),
        classes=list(classes),
        seed=seed,
        samples_per_class_per_domain=samples_per_class_per_domain,
        image_size=image_size,
    )


# -- splits ----------------------------------------------------------------------


@dataclass
class FewShotSplit:
    base_classes: np.ndarray
    novel_classes: np.ndarray
    shots: int
    train_idx: np.ndarray  # K shots per base class, source domains only
    test_base_idx: np.ndarray
    test_novel_idx: np.ndarray
    source_domains: np.ndarray
    seed: int

    def __post_init__(self):
        if set(self.base_classes.tolist()) & set(self.novel_classes.tolist()):
            raise ContractError("base and novel classes overlap")

    def to_dict(self):
        return {
            "base_classes": self.base_classes.tolist(),
            "novel_classes": self.novel_classes.tolist(),
            "shots": self.shots,
            "source_domains": self.source_domains.tolist(),
            "seed": self.seed,
        }


def make_base_to_novel_split(
    dataset: Dataset,
    fraction_base: float = 0.5,
    shots: int = 16,
    seed: int = 0,
    source_domains=None,
) -> FewShotSplit:
    """Split classes into base/novel; train = K shots per base class."""
    rng = rng_for(seed, "split-b2n")
    class_ids = np.array(sorted(dataset.class_id_list))
    n_base = int(round(len(class_ids) * fraction_base))
    if n_base < 1 or n_base >= len(class_ids):
        raise ContractError(f"fraction_base {fraction_base} leaves no base or no novel classes")
    perm = rng.permutation(class_ids)
    base, novel = np.sort(perm[:n_base]), np.sort(perm[n_base:])
    if source_domains is None:
        source_domains = np.array(sorted(dataset.domain_id_list))
    else:
        source_domains = np.array(sorted(source_domains))

    train, test_base = [], []
    for c in base:
        idx = dataset.indices(domains=source_domains, classes=[c])
        if len(idx) < shots + 1:
            raise ContractError(
                f"class {c} has {len(idx)} source samples, needs > {shots} for {shots}-shot"
            )
        order = rng.permutation(idx)
        train.extend(order[:shots])
        test_base.extend(order[shots:])
    test_novel = [i for c in novel for i in dataset.indices(domains=source_domains, classes=[c])]
    return FewShotSplit(
        base_classes=base,
        novel_classes=novel,
        shots=shots,
        train_idx=np.array(sorted(train), dtype=np.int64),
        test_base_idx=np.array(sorted(test_base), dtype=np.int64),
        test_novel_idx=np.array(sorted(test_novel), dtype=np.int64),
        source_domains=source_domains,
        seed=seed,
    )


@dataclass
class DomainSplit:
    source_domains: np.ndarray
    target_domains: np.ndarray
    classes: np.ndarray
    shots: int
    train_idx: np.ndarray
    test_source_idx: np.ndarray
    test_target_idx: dict[int, np.ndarray]
    seed: int

    def to_dict(self):
        return {
            "source_domains": self.source_domains.tolist(),
            "target_domains": self.target_domains.tolist(),
            "classes": self.classes.tolist(),
            "shots": self.shots,
            "seed": self.seed,
        }


def make_domain_split(
    dataset: Dataset,
    source_domains,
    target_domains,
    classes=None,
    shots: int = 16,
    seed: int = 0,
) -> DomainSplit:
    """Train on K shots per class from source domains; evaluate per target domain."""
    source = np.array(sorted(source_domains))
    target = np.array(sorted(target_domains))
    if set(source.tolist()) & set(target.tolist()):
        raise ContractError("source and target domains overlap")
    if classes is None:
        classes = np.array(sorted(dataset.class_id_list))
    else:
        classes = np.array(sorted(classes))
    rng = rng_for(seed, "split-domain")
    train, test_source = [], []
    for c in classes:
        idx = dataset.indices(domains=source, classes=[c])
        if len(idx) < shots + 1:
            raise ContractError(f"class {c}: not enough source samples for {shots}-shot")
        order = rng.permutation(idx)
        train.extend(order[:shots])
        test_source.extend(order[shots:])
    test_target = {
        int(t): dataset.indices(domains=[t], classes=classes) for t in target
    }
    return DomainSplit(
        source_domains=source,
        target_domains=target,
        classes=classes,
        shots=shots,
        train_idx=np.array(sorted(train), dtype=np.int64),
        test_source_idx=np.array(sorted(test_source), dtype=np.int64),
        test_target_idx=test_target,
        seed=seed,
    )


# -- on-disk format ---------------------------------------------------------------


def save_dataset(dataset: Dataset, root: str | os.PathLike):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[tuple[int, int], int] = {}
    for i in range(len(dataset)):
        dom = int(dataset.domain_ids[i])
        cls = int(dataset.class_ids[i])
        n = counters.get((dom, cls), 0)
        counters[(dom, cls)] = n + 1
        rel = Path(f"domain_{dom}") / f"class_{cls}" / f"sample_{n}.bin"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_tensor(Tensor(dataset.images[i]), root / rel)
        entries.append({"path": str(rel), "class_id": cls, "domain_id": dom})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "image_size": dataset.image_size,
        "samples_per_class_per_domain": dataset.samples_per_class_per_domain,
        "domains": [d.to_dict() for d in dataset.domains],
        "classes": [c.to_dict() for c in dataset.classes],
        "samples": entries,
    }
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise IntegrityError(
            f"unsupported dataset format_version {manifest.get('format_version')}"
        )
    size = manifest["image_size"]
    images, class_ids, domain_ids = [], [], []
    for entry in manifest["samples"]:
        path = root / entry["path"]
        if not path.exists():
            raise IntegrityError(f"manifest lists missing file: {path}")
        try:
            t = load_tensor(path)
        except IntegrityError as e:
            raise IntegrityError(f"corrupted sample file {path}: {e}") from e
        if t.shape != (3, size, size):
            raise IntegrityError(f"sample {path} has shape {t.shape}, expected (3, {size}, {size})")
        images.append(t.data)
        class_ids.append(entry["class_id"])
        domain_ids.append(entry["domain_id"])
    return Dataset(
        images=np.stack(images),
        class_ids=np.array(class_ids, dtype=np.int64),
        domain_ids=np.array(domain_ids, dtype=np.int64),
        domains=[DomainSpec.from_dict(d) for d in manifest["domains"]],
        classes=[ClassSpec.from_dict(c) for c in manifest["classes"]],
        seed=manifest["seed"],
        samples_per_class_per_domain=manifest["samples_per_class_per_domain"],
        image_size=size,
    )


def random_crop(image: np.ndarray, rng: np.random.Generator, min_scale: float = 0.7) -> np.ndarray:
    """Simple crop-and-resize augmentation baseline (nearest neighbor)."""
    c, h, w = image.shape
    scale = rng.uniform(min_scale, 1.0)
    ch, cw = max(2, int(round(h * scale))), max(2, int(round(w * scale)))
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    crop = image[:, top : top + ch, left : left + cw]
    rows = np.clip(np.round(np.linspace(0, ch - 1, h)).astype(int), 0, ch - 1)
    cols = np.clip(np.round(np.linspace(0, cw - 1, w)).astype(int), 0, cw - 1)
    return crop[:, rows][:, :, cols]
