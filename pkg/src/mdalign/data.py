"""Synthetic multi-domain data, digit-file ingestion, and batch sampling.

The synthetic generator draws class-conditional Gaussian features shared by
all domains and then applies one invertible transform per latent domain, so
that datasets with a controllable amount of domain shift can be produced
from a seed alone.  Real digit sets enter through the big-endian IDX format
and can be turned into pseudo-domains with deterministic pixel transforms.

Ground-truth latent domain ids (and target labels) are carried on hidden
fields that batches never expose: the sampler and the training loop cannot
see them, evaluation code reads them through the accessors at the bottom of
this module.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .assignment import KNOWN_SOURCE, TARGET, UNKNOWN_SOURCE, DomainTag

__all__ = [
    "Batch",
    "BatchSampler",
    "BatchSpec",
    "Dataset",
    "FeatureShift",
    "IdxCountMismatchError",
    "IdxError",
    "IdxMagicError",
    "IdxTruncatedError",
    "ImageShift",
    "LabeledSample",
    "SynthConfig",
    "apply_feature_shift",
    "evaluation_label",
    "idx_load",
    "idx_write_images",
    "idx_write_labels",
    "image_transform",
    "load_manifest",
    "make_batch",
    "reveal_domain_label",
    "synth_make",
    "true_latent_domain",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for digit-file format failures."""


class IdxMagicError(IdxError):
    """File does not start with the expected magic number."""


class IdxTruncatedError(IdxError):
    """File ended before the declared payload."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the sample count."""


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class LabeledSample:
    """One sample: features, optional training label, and its domain tag.

    hidden_label and hidden_latent_domain are evaluation-only ground truth;
    use the accessors evaluation_label / true_latent_domain to read them.
    Training code must not touch them, and batches do not carry them.
    """

    features: np.ndarray
    class_label: int | None
    tag: DomainTag
    dataset_id: int | None = None
    hidden_label: int | None = field(default=None, repr=False)
    hidden_latent_domain: int | None = field(default=None, repr=False)


@dataclass
class Dataset:
    source_train: list
    source_test: list
    target_train: list
    target_test: list
    meta: dict


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class FeatureShift:
    """Deterministic feature-space transform defining one domain.

    rotation acts on consecutive coordinate pairs (0,1), (2,3), ...; offset
    and scale may be scalars or per-dimension tuples; permutation reorders
    the feature dimensions.  All parts are invertible except the additive
    noise, which is only the identity at sigma 0.
    """

    rotation: float = 0.0
    offset: float | tuple = 0.0
    scale: float | tuple = 1.0
    noise_sigma: float = 0.0
    permutation: tuple[int, ...] | None = None


def apply_feature_shift(x: np.ndarray, shift: FeatureShift, rng: np.random.Generator) -> np.ndarray:
    """Apply a domain transform to [n, dim] feature rows."""
    out = np.array(x, dtype=np.float64)
    if shift.rotation != 0.0:
        c, s = np.cos(shift.rotation), np.sin(shift.rotation)
        for j in range(0, out.shape[1] - 1, 2):
            a = out[:, j].copy()
            b = out[:, j + 1].copy()
            out[:, j] = c * a - s * b
            out[:, j + 1] = s * a + c * b
    out *= np.asarray(shift.scale, dtype=np.float64)
    out += np.asarray(shift.offset, dtype=np.float64)
    if shift.permutation is not None:
        if sorted(shift.permutation) != list(range(out.shape[1])):
            raise ValueError("permutation must reorder all feature dimensions")
        out = out[:, list(shift.permutation)]
    if shift.noise_sigma > 0.0:
        out += rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return out


@dataclass(frozen=True)
class SynthConfig:
    """Recipe for a seeded synthetic multi-domain classification task.

    Class prototypes are shared across domains; each latent domain applies
    its own transform, and the target domain a held-out one.  The seed fully
    determines the dataset.  patch_hw switches to rank-3 per-sample features
    [dim, h, w] that exercise the spatial broadcast path.

    conflict_pair (i, j) adds opposite offsets of strength/2 times the
    prototype difference P_j - P_i to the domains (alternating sign), making
    class i of one domain overlap class j of the other in raw feature space.
    Pooled statistics cannot untangle that overlap, per-domain statistics
    can, so it controls how much latent-domain structure matters.
    """

    n_latent_domains: int = 2
    n_classes: int = 4
    feature_dim: int = 6
    train_per_domain: int = 200
    test_per_domain: int = 200
    domain_shifts: tuple[FeatureShift, ...] = ()
    target_shift: FeatureShift = FeatureShift()
    class_separation: float = 3.0
    conflict_pair: tuple[int, int] | None = None
    conflict_strength: float = 1.0
    standardize: bool = False
    patch_hw: tuple[int, int] | None = None
    patch_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_latent_domains < 1:
            raise ValueError("need at least one latent domain")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.feature_dim < 1 or self.train_per_domain < 1 or self.test_per_domain < 1:
            raise ValueError("dimensions and sample counts must be >= 1")
        if self.domain_shifts and len(self.domain_shifts) != self.n_latent_domains:
            raise ValueError("one domain shift per latent domain (or none for identities)")
        if self.conflict_pair is not None:
            i, j = self.conflict_pair
            if not (0 <= i < self.n_classes and 0 <= j < self.n_classes and i != j):
                raise ValueError("conflict_pair must name two distinct classes")


def _balanced_labels(count: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % n_classes
    return rng.permutation(labels)


def synth_make(cfg: SynthConfig) -> Dataset:
    """Generate source and target sets for a synthetic latent-domain task."""
    rng = np.random.default_rng(cfg.seed)
    prototypes = cfg.class_separation * rng.normal(size=(cfg.n_classes, cfg.feature_dim))
    shifts = cfg.domain_shifts or tuple(FeatureShift() for _ in range(cfg.n_latent_domains))

    conflict = np.zeros(cfg.feature_dim)
    if cfg.conflict_pair is not None:
        i, j = cfg.conflict_pair
        conflict = 0.5 * cfg.conflict_strength * (prototypes[j] - prototypes[i])

    def draw(count, shift, *, domain, is_target):
        labels = _balanced_labels(count, cfg.n_classes, rng)
        base = prototypes[labels] + rng.normal(size=(count, cfg.feature_dim))
        if not is_target and cfg.conflict_pair is not None:
            base = base + (1.0 if domain % 2 == 0 else -1.0) * conflict
        x = apply_feature_shift(base, shift, rng)
        if cfg.patch_hw is not None:
            h, w = cfg.patch_hw
            x = x[:, :, None, None] + cfg.patch_jitter * rng.normal(size=(count, cfg.feature_dim, h, w))
        samples = []
        for i in range(count):
            if is_target:
                samples.append(
                    LabeledSample(
                        features=x[i],
                        class_label=None,
                        tag=DomainTag.target(),
                        hidden_label=int(labels[i]),
                    )
                )
            else:
                samples.append(
                    LabeledSample(
                        features=x[i],
                        class_label=int(labels[i]),
                        tag=DomainTag.unknown_source(),
                        hidden_label=int(labels[i]),
                        hidden_latent_domain=domain,
                    )
                )
        return samples

    source_train, source_test = [], []
    for d, shift in enumerate(shifts):
        source_train += draw(cfg.train_per_domain, shift, domain=d, is_target=False)
        source_test += draw(cfg.test_per_domain, shift, domain=d, is_target=False)
    target_train = draw(cfg.train_per_domain, cfg.target_shift, domain=None, is_target=True)
    target_test = draw(cfg.test_per_domain, cfg.target_shift, domain=None, is_target=True)

    if cfg.standardize:
        # label-free preprocessing: pooled moments of the unlabeled training
        # material, applied to every split
        pool = np.stack([s.features for s in source_train + target_train])
        axes = tuple(i for i in range(pool.ndim) if i != 1)
        mu = pool.mean(axis=axes)
        sd = pool.std(axis=axes)
        sd[sd == 0] = 1.0
        shape = (-1,) + (1,) * (pool.ndim - 2)
        for split in (source_train, source_test, target_train, target_test):
            for s in split:
                s.features = (s.features - mu.reshape(shape)) / sd.reshape(shape)

    meta = {
        "prototypes": prototypes,
        "n_latent_domains": cfg.n_latent_domains,
        "n_classes": cfg.n_classes,
        "feature_dim": cfg.feature_dim,
    }
    return Dataset(source_train, source_test, target_train, target_test, meta)


# ---------------------------------------------------------------------------
# digit pseudo-domains


@dataclass(frozen=True)
class ImageShift:
    """Deterministic pixel transform for building pseudo-domains from digits."""

    rot90: int = 0
    gain: float = 1.0
    bias: float = 0.0
    invert: bool = False
    noise_sigma: float = 0.0


def image_transform(x: np.ndarray, shift: ImageShift, seed: int = 0) -> np.ndarray:
    """Apply an ImageShift to a stack of images [n, 1, h, w]."""
    out = np.array(x, dtype=np.float64)
    if out.ndim != 4:
        raise ValueError("image_transform expects [n, channels, h, w]")
    if shift.rot90 % 4:
        out = np.rot90(out, k=shift.rot90 % 4, axes=(2, 3)).copy()
    if shift.gain != 1.0 or shift.bias != 0.0:
        out = shift.gain * out + shift.bias
    if shift.invert:
        out = 1.0 - out
    if shift.noise_sigma > 0.0:
        out = out + np.random.default_rng(seed).normal(0.0, shift.noise_sigma, size=out.shape)
    return out


# ---------------------------------------------------------------------------
# IDX files


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxTruncatedError(f"{path}: needed {n} more bytes, found {len(data)}")
    return data


def _read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path))
        if magic != IMAGE_MAGIC:
            raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, path))
        pixels = np.frombuffer(_read_exact(f, n * h * w, path), dtype=np.uint8)
    return pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0


def _read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path))
        if magic != LABEL_MAGIC:
            raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        (n,) = struct.unpack(">I", _read_exact(f, 4, path))
        labels = np.frombuffer(_read_exact(f, n, path), dtype=np.uint8)
    return labels.astype(np.int64)


def idx_load(images_path, labels_path):
    """Read a big-endian IDX image/label file pair.

    Returns (images [n, 1, h, w] scaled to [0, 1], labels int64 [n]).  Bad
    magic numbers, truncated payloads, and image/label count disagreements
    each raise their own error type.
    """
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def idx_write_images(path, images: np.ndarray) -> None:
    """Write uint8 images [n, h, w] or [n, 1, h, w] in IDX format."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError("expected [n, h, w] images")
    arr = arr.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *arr.shape))
        f.write(arr.tobytes())


def idx_write_labels(path, labels) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    if arr.ndim != 1:
        raise ValueError("expected a flat label vector")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, arr.shape[0]))
        f.write(arr.tobytes())


def _resolve(path_str: str, data_dir, manifest_dir) -> str:
    if os.path.isabs(path_str):
        return path_str
    for root in (data_dir, os.environ.get("MDA_DATA_DIR"), manifest_dir):
        if root:
            candidate = os.path.join(root, path_str)
            if os.path.exists(candidate):
                return candidate
    return os.path.join(manifest_dir, path_str)


def load_manifest(path, data_dir=None, flatten=True) -> Dataset:
    """Load a dataset manifest: a JSON document listing IDX files and domain tags.

    Schema: {"sources": [{"images", "labels", optional "domain"}...],
    "target": {"images", "labels"}, optional "target_test": {...}}.  Source
    entries with a "domain" index become known-source samples; the others
    unknown-source.  Relative paths resolve against data_dir, then the
    MDA_DATA_DIR environment variable, then the manifest's directory.
    Target labels are loaded but hidden from training.  With flatten on
    (the default) images become flat pixel vectors, the natural input for
    the dense toy networks.
    """
    with open(path) as f:
        doc = json.load(f)
    manifest_dir = os.path.dirname(os.path.abspath(path))

    def load_pair(entry):
        images, labels = idx_load(
            _resolve(entry["images"], data_dir, manifest_dir),
            _resolve(entry["labels"], data_dir, manifest_dir),
        )
        if flatten:
            images = images.reshape(images.shape[0], -1)
        return images, labels

    source_train = []
    for ds_id, entry in enumerate(doc["sources"]):
        images, labels = load_pair(entry)
        domain = entry.get("domain")
        tag = DomainTag.known_source(domain) if domain is not None else DomainTag.unknown_source()
        for i in range(images.shape[0]):
            source_train.append(
                LabeledSample(
                    features=images[i],
                    class_label=int(labels[i]),
                    tag=tag,
                    dataset_id=ds_id,
                    hidden_label=int(labels[i]),
                    hidden_latent_domain=domain if domain is not None else ds_id,
                )
            )

    def load_target(entry):
        images, labels = load_pair(entry)
        return [
            LabeledSample(
                features=images[i],
                class_label=None,
                tag=DomainTag.target(),
                hidden_label=int(labels[i]),
            )
            for i in range(images.shape[0])
        ]

    target_train = load_target(doc["target"])
    target_test = load_target(doc["target_test"]) if "target_test" in doc else target_train
    return Dataset(source_train, [], target_train, target_test, {"manifest": os.path.abspath(path)})


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """A stacked training batch; carries no hidden evaluation fields."""

    features: np.ndarray
    class_labels: np.ndarray
    tags: list
    source_mask: np.ndarray = None
    target_mask: np.ndarray = None
    known_mask: np.ndarray = None
    unknown_mask: np.ndarray = None
    known_domains: np.ndarray = None

    def __post_init__(self):
        kinds = [t.kind for t in self.tags]
        self.target_mask = np.array([k == TARGET for k in kinds], dtype=bool)
        self.source_mask = ~self.target_mask
        self.known_mask = np.array([k == KNOWN_SOURCE for k in kinds], dtype=bool)
        self.unknown_mask = np.array([k == UNKNOWN_SOURCE for k in kinds], dtype=bool)
        self.known_domains = np.array(
            [t.index if t.kind == KNOWN_SOURCE else -1 for t in self.tags], dtype=np.int64
        )

    @property
    def size(self) -> int:
        return self.features.shape[0]


def make_batch(samples: list) -> Batch:
    """Stack samples into arrays; target labels come through as -1."""
    features = np.stack([s.features for s in samples]).astype(np.float64)
    labels = np.array(
        [s.class_label if s.class_label is not None else -1 for s in samples], dtype=np.int64
    )
    return Batch(features=features, class_labels=labels, tags=[s.tag for s in samples])


@dataclass(frozen=True)
class BatchSpec:
    """Quota-based batch recipe: so many source samples, so many target."""

    source_quota: int = 64
    target_quota: int = 64
    seed: int | None = None
    replace: bool = False
    balance_datasets: bool = False

    def __post_init__(self):
        if self.source_quota < 0 or self.target_quota < 0:
            raise ValueError("quotas must be >= 0")


class _Epoch:
    """Endless epoch-shuffled index stream over one pool."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def take(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        got = 0
        while got < count:
            if self.cursor == self.size:
                self.order = self.rng.permutation(self.size)
                self.cursor = 0
            step = min(count - got, self.size - self.cursor)
            out[got : got + step] = self.order[self.cursor : self.cursor + step]
            self.cursor += step
            got += step
        return out


class BatchSampler:
    """Draws quota batches: uniform over the pooled source set plus target.

    The sampler sees only public sample fields; hidden ground truth never
    reaches a batch.  With balance_datasets on, the source quota is split
    evenly over the declared dataset ids (file provenance, not latent
    domains), mirroring per-dataset batch quotas.
    """

    def __init__(self, source: list, target: list, spec: BatchSpec):
        if spec.seed is None:
            raise ValueError("BatchSpec.seed must be set before sampling")
        if spec.source_quota > 0 and not source:
            raise ValueError("source pool is empty")
        if spec.target_quota > 0 and not target:
            raise ValueError("target pool is empty")
        if not spec.replace:
            if spec.source_quota > len(source):
                raise ValueError(f"source quota {spec.source_quota} exceeds pool size {len(source)}")
            if spec.target_quota > len(target):
                raise ValueError(f"target quota {spec.target_quota} exceeds pool size {len(target)}")
        self.source = source
        self.target = target
        self.spec = spec
        self._rng = np.random.default_rng(spec.seed)
        if spec.balance_datasets:
            ids = sorted({s.dataset_id for s in source})
            if None in ids:
                raise ValueError("balance_datasets requires dataset ids on all source samples")
            self._groups = [[i for i, s in enumerate(source) if s.dataset_id == g] for g in ids]
            self._group_epochs = [_Epoch(len(g), self._rng) for g in self._groups]
        else:
            self._source_epoch = _Epoch(len(source), self._rng) if source else None
        self._target_epoch = _Epoch(len(target), self._rng) if target else None

    def _source_indices(self) -> np.ndarray:
        quota = self.spec.source_quota
        if self.spec.replace:
            return self._rng.integers(0, len(self.source), size=quota)
        if not self.spec.balance_datasets:
            return self._source_epoch.take(quota)
        per, extra = divmod(quota, len(self._groups))
        picks = []
        for gi, (group, epoch) in enumerate(zip(self._groups, self._group_epochs)):
            want = per + (1 if gi < extra else 0)
            picks.append(np.asarray(group)[epoch.take(want)])
        return np.concatenate(picks)

    def next_batch(self) -> Batch:
        samples = [self.source[i] for i in self._source_indices()] if self.spec.source_quota else []
        if self.spec.target_quota:
            if self.spec.replace:
                t_idx = self._rng.integers(0, len(self.target), size=self.spec.target_quota)
            else:
                t_idx = self._target_epoch.take(self.spec.target_quota)
            samples += [self.target[i] for i in t_idx]
        return make_batch(samples)


# ---------------------------------------------------------------------------
# evaluation-only accessors for hidden ground truth


def true_latent_domain(sample: LabeledSample):
    """Evaluation-side accessor for the hidden latent domain id."""
    return sample.hidden_latent_domain


def evaluation_label(sample: LabeledSample):
    """Evaluation-side accessor for the hidden class label."""
    return sample.hidden_label


def reveal_domain_label(sample: LabeledSample) -> LabeledSample:
    """A copy of the sample with its latent domain turned into a known tag.

    Experiment-level operation for semi-supervised runs; the revealed copy is
    what enters training.
    """
    domain = true_latent_domain(sample)
    if domain is None:
        raise ValueError("sample has no latent domain to reveal")
    return replace(sample, tag=DomainTag.known_source(domain))
