"""Run configuration: JSON document <-> typed sections, with field-path validation errors.

Example document::

    {
      "dataset": {"synthetic": {"K": 4, "gain_range": [0.5, 2.0], "bias_range": [-1, 1]}},
      "model": {"kind": "small_cnn"},
      "augmentation": {"arm": "rdn"},
      "algorithm": {"name": "fedavg", "lr": 0.05, "rounds": 30},
      "seeds": [0, 1],
      "output_dir": "runs/rdn"
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .augmentation import (
    AugmentationPipeline,
    ChannelStats,
    FedMix,
    FixedNormalize,
    HorizontalFlip,
    RDN,
    RDNV,
)
from .datasets import FederationData, SkewConfig, generate_synthetic, load_idx_partitioned
from .errors import ConfigError
from .federation import AlgorithmConfig
from .model import MLP, ModelSpec, SmallCNN

ARMS = ("basic", "norm", "fedmix", "rdn", "rdnv")
_REQUIRED = object()


def _get(d: Mapping[str, Any], key: str, path: str, kind, default=_REQUIRED):
    full = f"{path}.{key}" if path else key
    if key not in d:
        if default is _REQUIRED:
            raise ConfigError("missing required field", full)
        return default
    value = d[key]
    try:
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is dict:
            if not isinstance(value, dict):
                raise TypeError
            return value
        if kind is list:
            if not isinstance(value, list):
                raise TypeError
            return value
    except TypeError:
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}", full) from None
    raise AssertionError(kind)


def _floats(value, path: str, length: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError("expected a list of numbers", path)
    if length is not None and len(value) != length:
        raise ConfigError(f"expected {length} values, got {len(value)}", path)
    return tuple(float(v) for v in value)


def _matrix(value, path: str) -> tuple[tuple[float, ...], ...]:
    if not isinstance(value, list):
        raise ConfigError("expected a list of lists", path)
    return tuple(_floats(row, f"{path}[{i}]") for i, row in enumerate(value))


def _reject_unknown(d: Mapping[str, Any], allowed, path: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown field(s) {extra}", path or "<root>")


@dataclass(frozen=True)
class FileDataset:
    path: str
    partition: dict


@dataclass(frozen=True)
class AugmentationConfig:
    arm: str
    flip_p: float = 0.5
    order: str = "flip_first"  # or "normalize_first"
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None
    fedmix_lam: float = 0.05
    fedmix_mode: str = "fixed"
    fedmix_alpha: float = 0.2
    fedmix_mean_batch_size: int = 5
    pooled_std: bool = False

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; expected one of {ARMS}", "augmentation.arm")
        if self.order not in ("flip_first", "normalize_first"):
            raise ConfigError(f"unknown order {self.order!r}", "augmentation.order")

    def pipeline(self, channels: int) -> AugmentationPipeline:
        """Train-mode pipeline for this arm."""
        flip = [HorizontalFlip(self.flip_p)]
        if self.arm == "basic":
            return AugmentationPipeline(flip)
        if self.arm == "fedmix":
            return AugmentationPipeline(flip + [FedMix(self.fedmix_lam, self.fedmix_mode, self.fedmix_alpha,
                                                       self.fedmix_mean_batch_size)])
        if self.arm == "norm":
            mean = self.norm_mean if self.norm_mean is not None else (0.5,) * channels
            std = self.norm_std if self.norm_std is not None else (0.5,) * channels
            if len(mean) != channels or len(std) != channels:
                raise ConfigError(f"expected {channels} values", "augmentation.norm_mean/norm_std")
            norm = FixedNormalize(ChannelStats(mean, std))
        else:
            norm = RDN() if self.arm == "rdn" else RDNV()
        steps = flip + [norm] if self.order == "flip_first" else [norm] + flip
        return AugmentationPipeline(steps)


@dataclass(frozen=True)
class RunConfig:
    dataset: SkewConfig | FileDataset
    model: MLP | SmallCNN
    augmentation: AugmentationConfig
    algorithm: AlgorithmConfig
    seeds: tuple[int, ...]
    output_dir: str
    workers: int = 1
    cross_site: bool = True

    def load_federation(self) -> FederationData:
        if isinstance(self.dataset, FileDataset):
            return load_idx_partitioned(self.dataset.path, self.dataset.partition)
        return generate_synthetic(self.dataset)

    def model_spec(self, fed: FederationData) -> ModelSpec:
        return ModelSpec(self.model, fed.image_shape, fed.num_classes)


# --- parsing -------------------------------------------------------------------

_SKEW_FIELDS = ("K", "num_classes", "image_shape", "gains", "biases", "noise_std", "n_train", "n_test", "seed",
                "gain_range", "bias_range")


def _parse_skew(d: Mapping[str, Any], path: str) -> SkewConfig:
    _reject_unknown(d, _SKEW_FIELDS, path)
    kw: dict[str, Any] = {"K": _get(d, "K", path, int)}
    for key in ("num_classes", "n_train", "n_test", "seed"):
        if key in d:
            kw[key] = _get(d, key, path, int)
    if "noise_std" in d:
        kw["noise_std"] = _get(d, "noise_std", path, float)
    if "image_shape" in d:
        shape = _get(d, "image_shape", path, list)
        if len(shape) != 3 or not all(isinstance(v, int) and not isinstance(v, bool) for v in shape):
            raise ConfigError("expected three integers [C, H, W]", f"{path}.image_shape")
        kw["image_shape"] = tuple(shape)
    for key in ("gain_range", "bias_range"):
        if key in d:
            kw[key] = _floats(d[key], f"{path}.{key}", 2)
    for key in ("gains", "biases"):
        if key in d and d[key] is not None:
            kw[key] = _matrix(d[key], f"{path}.{key}")
    try:
        return SkewConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.field}" if exc.field else path) from None


def _parse_dataset(d: Mapping[str, Any]) -> SkewConfig | FileDataset:
    path = "dataset"
    if "synthetic" in d and "file" in d:
        raise ConfigError("give exactly one of 'synthetic' or 'file'", path)
    if "synthetic" in d:
        _reject_unknown(d, ("synthetic",), path)
        return _parse_skew(_get(d, "synthetic", path, dict), f"{path}.synthetic")
    if "file" in d:
        _reject_unknown(d, ("file",), path)
        f = _get(d, "file", path, dict)
        _reject_unknown(f, ("path", "partition"), f"{path}.file")
        return FileDataset(_get(f, "path", f"{path}.file", str), _get(f, "partition", f"{path}.file", dict))
    raise ConfigError("missing required field (one of 'synthetic' or 'file')", f"{path}.synthetic")


def _parse_model(d: Mapping[str, Any]) -> MLP | SmallCNN:
    path = "model"
    kind = _get(d, "kind", path, str, "small_cnn")
    if kind == "mlp":
        _reject_unknown(d, ("kind", "widths", "activation"), path)
        widths = _get(d, "widths", path, list, [64])
        if not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths):
            raise ConfigError("expected positive integers", f"{path}.widths")
        activation = _get(d, "activation", path, str, "relu")
        if activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {activation!r}", f"{path}.activation")
        return MLP(tuple(widths), activation)
    if kind == "small_cnn":
        _reject_unknown(d, ("kind", "conv_channels", "kernel_size", "pool", "head_width"), path)
        channels = _get(d, "conv_channels", path, list, [8, 16])
        if not all(isinstance(c, int) and not isinstance(c, bool) and c > 0 for c in channels):
            raise ConfigError("expected positive integers", f"{path}.conv_channels")
        k = _get(d, "kernel_size", path, int, 3)
        if k < 1 or k % 2 == 0:
            raise ConfigError("must be a positive odd integer", f"{path}.kernel_size")
        pool = _get(d, "pool", path, int, 2)
        head = _get(d, "head_width", path, int, 32)
        if pool < 1 or head < 1:
            raise ConfigError("pool and head_width must be positive", path)
        return SmallCNN(tuple(channels), k, pool, head)
    raise ConfigError(f"unknown model kind {kind!r}; expected 'mlp' or 'small_cnn'", f"{path}.kind")


def _parse_augmentation(d: Mapping[str, Any]) -> AugmentationConfig:
    path = "augmentation"
    _reject_unknown(d, AugmentationConfig.__dataclass_fields__, path)
    kw: dict[str, Any] = {"arm": _get(d, "arm", path, str)}
    for key in ("flip_p", "fedmix_lam", "fedmix_alpha"):
        if key in d:
            kw[key] = _get(d, key, path, float)
    for key in ("order", "fedmix_mode"):
        if key in d:
            kw[key] = _get(d, key, path, str)
    if "fedmix_mean_batch_size" in d:
        kw["fedmix_mean_batch_size"] = _get(d, "fedmix_mean_batch_size", path, int)
    if "pooled_std" in d:
        kw["pooled_std"] = _get(d, "pooled_std", path, bool)
    for key in ("norm_mean", "norm_std"):
        if d.get(key) is not None:
            kw[key] = _floats(d[key], f"{path}.{key}")
    cfg = AugmentationConfig(**kw)
    # build the steps once so bad parameters surface here, with a field path
    try:
        HorizontalFlip(cfg.flip_p)
        if cfg.arm == "fedmix":
            FedMix(cfg.fedmix_lam, cfg.fedmix_mode, cfg.fedmix_alpha, cfg.fedmix_mean_batch_size)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{exc.field.replace('.', '_')}") from None
    if (cfg.norm_mean is None) != (cfg.norm_std is None) or (
            cfg.norm_mean is not None and len(cfg.norm_mean) != len(cfg.norm_std)):
        raise ConfigError("norm_mean and norm_std must be given together, with equal lengths", f"{path}.norm_std")
    if cfg.norm_std is not None and min(cfg.norm_std) <= 0:
        raise ConfigError("standard deviations must be > 0", f"{path}.norm_std")
    return cfg


def _parse_algorithm(d: Mapping[str, Any]) -> AlgorithmConfig:
    path = "algorithm"
    _reject_unknown(d, AlgorithmConfig.__dataclass_fields__, path)
    kw: dict[str, Any] = {"name": _get(d, "name", path, str)}
    for key in ("mu", "beta", "lr", "weight_decay"):
        if key in d:
            kw[key] = _get(d, key, path, float)
    for key in ("batch_size", "local_epochs", "rounds"):
        if key in d:
            kw[key] = _get(d, key, path, int)
    return AlgorithmConfig(**kw)


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", "<root>")
    _reject_unknown(doc, ("dataset", "model", "augmentation", "algorithm", "seeds", "output_dir", "workers",
                          "cross_site"), "")
    dataset = _parse_dataset(_get(doc, "dataset", "", dict))
    model = _parse_model(_get(doc, "model", "", dict, {}))
    aug = _parse_augmentation(_get(doc, "augmentation", "", dict))
    algo = _parse_algorithm(_get(doc, "algorithm", "", dict))
    seeds = _get(doc, "seeds", "", list)
    if not seeds:
        raise ConfigError("must list at least one seed", "seeds")
    for i, s in enumerate(seeds):
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            raise ConfigError("expected a non-negative integer", f"seeds[{i}]")
    output_dir = _get(doc, "output_dir", "", str)
    workers = _get(doc, "workers", "", int, 1)
    if workers < 1:
        raise ConfigError("must be >= 1", "workers")
    cross_site = _get(doc, "cross_site", "", bool, True)
    return RunConfig(dataset, model, aug, algo, tuple(seeds), output_dir, workers, cross_site)


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}", str(path)) from None
    return parse_config(doc)


# --- serialization -----------------------------------------------------------

def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    if isinstance(cfg.dataset, FileDataset):
        dataset = {"file": {"path": cfg.dataset.path, "partition": cfg.dataset.partition}}
    else:
        s = cfg.dataset
        syn: dict[str, Any] = {
            "K": s.K, "num_classes": s.num_classes, "image_shape": list(s.image_shape),
            "noise_std": s.noise_std, "n_train": s.n_train, "n_test": s.n_test, "seed": s.seed,
            "gain_range": list(s.gain_range), "bias_range": list(s.bias_range),
        }
        if s.gains is not None:
            syn["gains"] = [list(r) for r in s.gains]
        if s.biases is not None:
            syn["biases"] = [list(r) for r in s.biases]
        dataset = {"synthetic": syn}
    if isinstance(cfg.model, MLP):
        model = {"kind": "mlp", "widths": list(cfg.model.widths), "activation": cfg.model.activation}
    else:
        m = cfg.model
        model = {"kind": "small_cnn", "conv_channels": list(m.conv_channels), "kernel_size": m.kernel_size,
                 "pool": m.pool, "head_width": m.head_width}
    a = cfg.augmentation
    aug = {
        "arm": a.arm, "flip_p": a.flip_p, "order": a.order,
        "norm_mean": list(a.norm_mean) if a.norm_mean is not None else None,
        "norm_std": list(a.norm_std) if a.norm_std is not None else None,
        "fedmix_lam": a.fedmix_lam, "fedmix_mode": a.fedmix_mode, "fedmix_alpha": a.fedmix_alpha,
        "fedmix_mean_batch_size": a.fedmix_mean_batch_size, "pooled_std": a.pooled_std,
    }
    g = cfg.algorithm
    algo = {"name": g.name, "mu": g.mu, "beta": g.beta, "lr": g.lr, "weight_decay": g.weight_decay,
            "batch_size": g.batch_size, "local_epochs": g.local_epochs, "rounds": g.rounds}
    return {"dataset": dataset, "model": model, "augmentation": aug, "algorithm": algo,
            "seeds": list(cfg.seeds), "output_dir": cfg.output_dir, "workers": cfg.workers,
            "cross_site": cfg.cross_site}
