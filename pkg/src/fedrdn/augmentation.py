"""Channel statistics and the augmentation flow (flip, normalization, FedRDN, FedRDN-V, FedMix).

Images are ``[C, H, W]`` arrays; every transform also accepts a ``[B, C, H, W]``
batch. Random steps take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, DegenerateStatsError, MisuseError

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, copy=True).reshape(-1)
        std = np.array(self.std, dtype=np.float64, copy=True).reshape(-1)
        if mean.shape != std.shape:
            raise MisuseError(f"mean has {mean.size} channels, std has {std.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise MisuseError("channel statistics must be finite")
        if np.any(std < 0):
            raise MisuseError("standard deviations must be >= 0")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self) -> int:
        return self.mean.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> ChannelStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class StatsRegistry:
    """Dataset statistics of every client, indexed by client id."""

    per_client: tuple[ChannelStats, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_client", tuple(self.per_client))
        if not self.per_client:
            raise MisuseError("a statistics registry needs at least one client")
        C = {s.channels for s in self.per_client}
        if len(C) != 1:
            raise MisuseError(f"registry mixes channel counts {sorted(C)}")

    @property
    def K(self) -> int:
        return len(self.per_client)

    def __getitem__(self, k: int) -> ChannelStats:
        return self.per_client[k]

    def __len__(self) -> int:
        return len(self.per_client)


# --- statistics --------------------------------------------------------------

def _per_image(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image channel mean and population std for a ``[B, C, H, W]`` stack."""
    mean = x.mean(axis=(2, 3))
    std = np.sqrt(((x - mean[:, :, None, None]) ** 2).mean(axis=(2, 3)))
    return mean, std


def image_channel_stats(img: np.ndarray) -> ChannelStats:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[1] * img.shape[2] < 1:
        raise MisuseError(f"expected a [C, H, W] image with H*W >= 1, got shape {img.shape}")
    mean, std = _per_image(img[None])
    return ChannelStats(mean[0], std[0])


def dataset_channel_stats(ds, pooled: bool = False) -> ChannelStats:
    """Dataset-level statistics of a client's training images.

    Default: the average over images of per-image means and of per-image
    stds. ``pooled=True`` instead returns the std of all pixels of the
    dataset taken together (ablation only).
    """
    images = ds.train_x if hasattr(ds, "train_x") else np.asarray(ds, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise MisuseError("dataset statistics need a non-empty [n, C, H, W] image stack")
    mean, std = _per_image(images)
    if pooled:
        mu = mean.mean(axis=0)
        pooled_std = np.sqrt(((images - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
        return ChannelStats(mu, pooled_std)
    return ChannelStats(mean.mean(axis=0), std.mean(axis=0))


def rdnv_reference_stats(registry: StatsRegistry) -> ChannelStats:
    """Cross-client average of the registered means and stds."""
    means = np.stack([s.mean for s in registry.per_client])
    stds = np.stack([s.std for s in registry.per_client])
    return ChannelStats(means.mean(axis=0), stds.mean(axis=0))


# --- transforms --------------------------------------------------------------

def _check_std(stats: ChannelStats, eps: float = STD_FLOOR) -> None:
    low = np.flatnonzero(stats.std <= eps)
    if low.size:
        c = int(low[0])
        raise DegenerateStatsError(f"channel {c} has std {stats.std[c]:.3g} <= {eps:g}; cannot normalize")


def normalize_image(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """``(x_c - mean_c) / std_c`` per channel."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-3] != stats.channels:
        raise MisuseError(f"image shape {img.shape} does not match {stats.channels}-channel statistics")
    _check_std(stats)
    return (img - stats.mean[:, None, None]) / stats.std[:, None, None]


def rdn_draw(n: int, registry: StatsRegistry, rng: np.random.Generator) -> np.ndarray:
    """Source-client indices for ``n`` images, uniform over the registry."""
    return rng.integers(0, registry.K, size=n)


def rdn_train_transform(img: np.ndarray, registry: StatsRegistry, rng: np.random.Generator) -> np.ndarray:
    """Normalize with the statistics of a uniformly drawn client; one draw per image."""
    img = np.asarray(img, dtype=np.float64)
    out, _ = rdn_train_batch(img[None] if img.ndim == 3 else img, registry, rng)
    return out[0] if img.ndim == 3 else out


def rdn_train_batch(batch: np.ndarray, registry: StatsRegistry, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Batch form of :func:`rdn_train_transform`; also returns the drawn client per image."""
    for s in registry.per_client:
        _check_std(s)
    if batch.ndim != 4 or batch.shape[1] != registry[0].channels:
        raise MisuseError(f"batch shape {batch.shape} does not match {registry[0].channels}-channel registry")
    j = rdn_draw(len(batch), registry, rng)
    means = np.stack([s.mean for s in registry.per_client])[j]
    stds = np.stack([s.std for s in registry.per_client])[j]
    return (batch - means[:, :, None, None]) / stds[:, :, None, None], j


def rdn_test_transform(img: np.ndarray, own: ChannelStats) -> np.ndarray:
    return normalize_image(img, own)


def horizontal_flip(batch: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(batch)) < p
    if not flip.any():
        return batch
    out = batch.copy()
    out[flip] = batch[flip][..., ::-1]
    return out


def mean_images(images: np.ndarray, mean_batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Averages of disjoint random batches of local images (the FedMix upload).

    A trailing partial batch is dropped unless it is the only one.
    """
    if mean_batch_size < 1:
        raise ConfigError("mean_batch_size must be >= 1", "mean_batch_size")
    perm = rng.permutation(len(images))
    n_batches = max(1, len(images) // mean_batch_size)
    return np.stack([images[perm[i * mean_batch_size:(i + 1) * mean_batch_size]].mean(axis=0)
                     for i in range(n_batches)])


def fedmix_augment(batch: np.ndarray, labels_onehot: np.ndarray, mean_imgs: Sequence[np.ndarray],
                   lam: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Blend each image with a uniformly drawn shared mean image.

    ``x' = (1 - lam) x + lam * mean_j``; labels are scaled by ``1 - lam`` (the
    mean image carries no usable label in this setting).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}", "fedmix.lam")
    pool = np.asarray(mean_imgs, dtype=np.float64)
    if pool.ndim != 4 or len(pool) == 0:
        raise MisuseError("fedmix needs a non-empty stack of mean images")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != pool.shape[1:]:
        raise MisuseError(f"batch images {batch.shape[1:]} vs mean images {pool.shape[1:]}")
    j = rng.integers(0, len(pool), size=len(batch))
    return (1.0 - lam) * batch + lam * pool[j], (1.0 - lam) * np.asarray(labels_onehot, dtype=np.float64)


# --- pipeline ----------------------------------------------------------------

class Mode(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class HorizontalFlip:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"flip probability must lie in [0, 1], got {self.p}", "flip_p")


@dataclass(frozen=True)
class FixedNormalize:
    stats: ChannelStats


@dataclass(frozen=True)
class RDN:
    pass


@dataclass(frozen=True)
class RDNV:
    pass


@dataclass(frozen=True)
class FedMix:
    lam: float = 0.05
    mode: str = "fixed"  # "fixed" or "beta"
    alpha: float = 0.2
    mean_batch_size: int = 5

    def __post_init__(self):
        if self.mode == "fixed":
            if not 0.0 <= self.lam <= 1.0:
                raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}", "fedmix.lam")
        elif self.mode == "beta":
            if not self.alpha > 0:
                raise ConfigError(f"beta parameter must be > 0, got {self.alpha}", "fedmix.alpha")
        else:
            raise ConfigError(f"unknown lambda mode {self.mode!r}", "fedmix.mode")
        if self.mean_batch_size < 1:
            raise ConfigError("mean_batch_size must be >= 1", "fedmix.mean_batch_size")


Step = Union[HorizontalFlip, FixedNormalize, RDN, RDNV, FedMix]
NORMALIZATION_STEPS = (FixedNormalize, RDN, RDNV)


@dataclass(frozen=True)
class AugmentationPipeline:
    steps: tuple[Step, ...]
    mode: Mode = Mode.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "mode", Mode(self.mode))
        n_norm = sum(isinstance(s, NORMALIZATION_STEPS) for s in self.steps)
        if n_norm > 1:
            raise ConfigError(f"at most one normalization step per pipeline, got {n_norm}", "augmentation")

    def with_mode(self, mode: Mode | str) -> AugmentationPipeline:
        return AugmentationPipeline(self.steps, Mode(mode))

    @property
    def uses_registry(self) -> bool:
        return any(isinstance(s, (RDN, RDNV)) for s in self.steps)

    @property
    def uses_mean_images(self) -> bool:
        return any(isinstance(s, FedMix) for s in self.steps)


@dataclass
class AugContext:
    """What the steps may need. ``trace`` records ``(step, mode, source)`` when given a list."""

    registry: StatsRegistry | None = None
    own_stats: ChannelStats | None = None
    rng: np.random.Generator | None = None
    mean_images: np.ndarray | None = None
    num_classes: int | None = None
    trace: list | None = field(default=None, repr=False)


def _need(value, step: str, what: str):
    if value is None:
        raise ConfigError(f"step {step} requires {what} in the augmentation context", step)
    return value


def apply_pipeline(pipeline: AugmentationPipeline, x: np.ndarray, ctx: AugContext | None = None,
                   labels: np.ndarray | None = None):
    """Run the steps in order on an image or batch.

    Returns the transformed images, or ``(images, labels)`` when ``labels`` is
    given; FedMix turns labels into a soft-target matrix. In test mode flips
    and FedMix are skipped and RDN normalizes with the owner's statistics.
    """
    ctx = ctx or AugContext()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    batch = x[None] if single else x
    test = pipeline.mode is Mode.TEST

    def note(step, source):
        if ctx.trace is not None:
            ctx.trace.append((step, pipeline.mode.value, source))

    for step in pipeline.steps:
        if isinstance(step, HorizontalFlip):
            if test or step.p == 0.0:
                continue
            batch = horizontal_flip(batch, step.p, _need(ctx.rng, "HorizontalFlip", "an rng"))
        elif isinstance(step, FixedNormalize):
            batch = normalize_image(batch, step.stats)
            note("FixedNormalize", "fixed")
        elif isinstance(step, RDN):
            if test:
                batch = rdn_test_transform(batch, _need(ctx.own_stats, "RDN", "own_stats (test mode)"))
                note("RDN", "own")
            else:
                registry = _need(ctx.registry, "RDN", "the statistics registry (train mode)")
                batch, _ = rdn_train_batch(batch, registry, _need(ctx.rng, "RDN", "an rng"))
                note("RDN", "registry")
        elif isinstance(step, RDNV):
            ref = rdnv_reference_stats(_need(ctx.registry, "RDNV", "the statistics registry"))
            batch = normalize_image(batch, ref)
            note("RDNV", "average")
        elif isinstance(step, FedMix):
            if test:
                continue
            if labels is None:
                raise ConfigError("step FedMix requires labels", "FedMix")
            rng = _need(ctx.rng, "FedMix", "an rng")
            pool = _need(ctx.mean_images, "FedMix", "shared mean images")
            n_cls = _need(ctx.num_classes, "FedMix", "num_classes")
            lam = step.lam if step.mode == "fixed" else float(rng.beta(step.alpha, step.alpha))
            y = np.asarray(labels)
            onehot = y if y.ndim == 2 else np.eye(n_cls)[y.astype(np.int64)]
            batch, labels = fedmix_augment(batch, onehot, pool, lam, rng)
        else:
            raise MisuseError(f"unknown augmentation step {step!r}")

    out = batch[0] if single else batch
    return out if labels is None else (out, labels)
