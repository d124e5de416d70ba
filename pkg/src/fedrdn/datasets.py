"""Feature-skewed federations: synthetic generation and the FSIM1 binary format.

Every client shares the same class templates (so the label-conditional
content is identical); only a per-client, per-channel affine map
``x = gain * z + bias`` differs, which puts the skew in the input marginal.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, MisuseError

MAGIC = b"FSIM1"
_HEADER = struct.Struct("<5I")
HEADER_SIZE = len(MAGIC) + _HEADER.size


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        if self.train_x.ndim != 4 or len(self.train_x) < 1:
            raise ConfigError(f"client {self.client_id} needs at least one training image (n_k >= 1)")
        if len(self.train_x) != len(self.train_y) or len(self.test_x) != len(self.test_y):
            raise MisuseError(f"client {self.client_id}: image/label count mismatch")
        if self.test_x.ndim != 4 or (len(self.test_x) and self.test_x.shape[1:] != self.train_x.shape[1:]):
            raise MisuseError(f"client {self.client_id}: train/test image shapes differ")
        for a in (self.train_x, self.train_y, self.test_x, self.test_y):
            a.flags.writeable = False

    @property
    def n_k(self) -> int:
        return len(self.train_x)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])  # type: ignore[return-value]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClientDataset):
            return NotImplemented
        return self.client_id == other.client_id and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.train_x, self.train_y, self.test_x, self.test_y),
                (other.train_x, other.train_y, other.test_x, other.test_y),
            )
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class FederationData:
    clients: tuple[ClientDataset, ...]
    image_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        ids = [c.client_id for c in self.clients]
        if ids != list(range(len(ids))):
            raise MisuseError(f"client ids must be 0..K-1 in order, got {ids}")
        for c in self.clients:
            if c.image_shape != self.image_shape:
                raise MisuseError(f"client {c.client_id} image shape {c.image_shape} != {self.image_shape}")

    @property
    def K(self) -> int:
        return len(self.clients)

    @property
    def counts(self) -> list[int]:
        return [c.n_k for c in self.clients]


@dataclass(frozen=True)
class SkewConfig:
    K: int
    num_classes: int = 10
    image_shape: tuple[int, int, int] = (3, 16, 16)
    gains: tuple[tuple[float, ...], ...] | None = None
    biases: tuple[tuple[float, ...], ...] | None = None
    noise_std: float = 0.3
    n_train: int = 64
    n_test: int = 64
    seed: int = 0
    # convenience: gains/biases drawn from these ranges when not given explicitly
    gain_range: tuple[float, float] = (1.0, 1.0)
    bias_range: tuple[float, float] = (0.0, 0.0)
    _affine: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1", "K")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", "num_classes")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be positive (C, H, W), got {self.image_shape}", "image_shape")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1", "n_train")
        if self.n_test < 0:
            raise ConfigError("n_test must be >= 0", "n_test")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", "noise_std")
        C = self.image_shape[0]
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ConfigError(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}", "gain_range")
        if self.bias_range[0] > self.bias_range[1]:
            raise ConfigError(f"bias_range must satisfy lo <= hi, got {self.bias_range}", "bias_range")
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0xAFF1]))
        drawn_g = rng.uniform(*self.gain_range, size=(self.K, C))
        drawn_b = rng.uniform(*self.bias_range, size=(self.K, C))
        gains = drawn_g if self.gains is None else np.asarray(self.gains, dtype=np.float64)
        biases = drawn_b if self.biases is None else np.asarray(self.biases, dtype=np.float64)
        for name, arr in (("gains", gains), ("biases", biases)):
            if arr.shape != (self.K, C):
                raise ConfigError(f"expected shape ({self.K}, {C}), got {arr.shape}", name)
        if np.any(gains <= 0):
            k, c = np.argwhere(gains <= 0)[0]
            raise ConfigError(f"gain of client {k}, channel {c} is {gains[k, c]}; gains must be > 0", "gains")
        object.__setattr__(self, "_affine", (gains, biases))

    @property
    def gain_matrix(self) -> np.ndarray:
        return self._affine[0].copy()

    @property
    def bias_matrix(self) -> np.ndarray:
        return self._affine[1].copy()


def class_templates(num_classes: int, image_shape: Sequence[int], seed: int) -> np.ndarray:
    """Shared per-class images ``[num_classes, C, H, W]``.

    Each class gets a base intensity per channel plus a spatial motif (a
    Gaussian blob or an oriented stripe pattern) at a class-specific place,
    whose contrast also differs per channel.
    """
    C, H, W = image_shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E3A]))
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    out = np.empty((num_classes, C, H, W))
    for c in range(num_classes):
        level = rng.uniform(0.2, 0.8, size=C)
        contrast = rng.uniform(-0.5, 0.5, size=C)
        if c % 2 == 0:
            cy, cx = rng.uniform(0.25, 0.75, size=2)
            motif = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.15 ** 2))
        else:
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.5, 3.5)
            motif = 0.5 + 0.5 * np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        out[c] = level[:, None, None] + contrast[:, None, None] * motif[None]
    return out


def _client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id)]))


def balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def latent_samples(cfg: SkewConfig, client_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pre-affine images for one client: ``(train_z, train_y, test_z, test_y)``."""
    templates = class_templates(cfg.num_classes, cfg.image_shape, cfg.seed)
    rng = _client_rng(cfg.seed, client_id)
    parts = []
    for n in (cfg.n_train, cfg.n_test):
        y = balanced_labels(n, cfg.num_classes, rng)
        z = templates[y] + rng.normal(0.0, cfg.noise_std, size=(n, *cfg.image_shape))
        parts += [z, y.astype(np.int64)]
    return tuple(parts)  # type: ignore[return-value]


def channel_affine(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x * gain[None, :, None, None] + bias[None, :, None, None]


def generate_synthetic(cfg: SkewConfig) -> FederationData:
    gains, biases = cfg._affine
    clients = []
    for k in range(cfg.K):
        tz, ty, sz, sy = latent_samples(cfg, k)
        clients.append(ClientDataset(
            k,
            channel_affine(tz, gains[k], biases[k]), ty,
            channel_affine(sz, gains[k], biases[k]), sy,
        ))
    return FederationData(tuple(clients), cfg.image_shape, cfg.num_classes)


# --- FSIM1 binary format ---------------------------------------------------

def _record_dtype(C: int, H: int, W: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("pixels", "<f4", (C * H * W,))])


def write_fsim(path: str | Path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or len(images) != len(labels):
        raise MisuseError(f"write_fsim: images {images.shape} / labels {labels.shape}")
    n, C, H, W = images.shape
    if n and (labels.min() < 0 or labels.max() >= num_classes or num_classes > 0xFFFF):
        raise MisuseError("write_fsim: labels out of range for u16 / num_classes")
    rec = np.empty(n, dtype=_record_dtype(C, H, W))
    rec["label"] = labels
    rec["pixels"] = images.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(n, C, H, W, num_classes))
        fh.write(rec.tobytes())


def read_fsim(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """Return ``(images[n, C, H, W] float64, labels[n] int64, num_classes)``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", 0)
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header", len(raw))
    n, C, H, W, num_classes = _HEADER.unpack_from(raw, len(MAGIC))
    if min(C, H, W) == 0:
        raise FormatError(f"zero image extent in header (C={C}, H={H}, W={W})", len(MAGIC) + 4)
    if num_classes == 0:
        raise FormatError("num_classes is zero", len(MAGIC) + 16)
    dt = _record_dtype(C, H, W)
    expected = HEADER_SIZE + n * dt.itemsize
    if len(raw) < expected:
        complete = (len(raw) - HEADER_SIZE) // dt.itemsize
        raise FormatError(
            f"truncated payload: {n} records declared, {complete} complete", HEADER_SIZE + complete * dt.itemsize
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after {n} records", expected)
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=HEADER_SIZE)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"record {bad[0]} has label {labels[bad[0]]} >= num_classes {num_classes}",
                          HEADER_SIZE + int(bad[0]) * dt.itemsize)
    images = rec["pixels"].astype(np.float64).reshape(n, C, H, W)
    nonfinite = np.flatnonzero(~np.all(np.isfinite(images.reshape(n, -1)), axis=1))
    if nonfinite.size:
        raise FormatError(f"record {nonfinite[0]} has non-finite pixels", HEADER_SIZE + int(nonfinite[0]) * dt.itemsize)
    return images, labels, num_classes


def _assign(partition: Mapping[str, Any], n: int) -> tuple[np.ndarray, int]:
    if "assignments" in partition:
        assign = np.asarray(partition["assignments"], dtype=np.int64)
        if assign.shape != (n,):
            raise ConfigError(f"{assign.size} assignments for {n} records", "partition.assignments")
        K = int(partition.get("num_clients", assign.max() + 1 if n else 0))
        if n and (assign.min() < 0 or assign.max() >= K):
            raise ConfigError(f"assignments must lie in [0, {K})", "partition.assignments")
        return assign, K
    if "num_clients" not in partition:
        raise ConfigError("missing required field", "partition.num_clients")
    K = int(partition["num_clients"])
    if K < 1:
        raise ConfigError("must be >= 1", "partition.num_clients")
    scheme = partition.get("scheme", "round_robin")
    if scheme == "round_robin":
        return np.arange(n) % K, K
    if scheme == "contiguous":
        return (np.arange(n) * K) // max(n, 1), K
    if scheme == "random":
        rng = np.random.default_rng(int(partition.get("seed", 0)))
        return rng.permutation(np.arange(n) % K), K
    raise ConfigError(f"unknown scheme {scheme!r}", "partition.scheme")


def partition_records(images: np.ndarray, labels: np.ndarray, num_classes: int,
                      partition: Mapping[str, Any]) -> FederationData:
    """Split a flat record set into clients according to ``partition``.

    Keys: ``assignments`` (client per record) or ``num_clients`` + ``scheme``
    (round_robin | contiguous | random, with ``seed``); ``splits`` (``"train"``
    / ``"test"`` per record) or ``test_fraction``; optional ``gains`` /
    ``biases`` ([K][C]) applied per client to induce skew.
    """
    n = len(images)
    assign, K = _assign(partition, n)
    if "splits" in partition:
        splits = list(partition["splits"])
        if len(splits) != n or any(s not in ("train", "test") for s in splits):
            raise ConfigError("must list 'train' or 'test' for every record", "partition.splits")
        is_test = np.array([s == "test" for s in splits], dtype=bool)
    else:
        frac = float(partition.get("test_fraction", 0.2))
        if not 0 <= frac < 1:
            raise ConfigError(f"must lie in [0, 1), got {frac}", "partition.test_fraction")
        is_test = np.zeros(n, dtype=bool)
        for k in range(K):
            idx = np.flatnonzero(assign == k)
            n_test = int(math.floor(frac * len(idx)))
            is_test[idx[len(idx) - n_test:] if n_test else []] = True
    C = images.shape[1] if images.ndim == 4 else 0
    gains = np.asarray(partition.get("gains", np.ones((K, C))), dtype=np.float64)
    biases = np.asarray(partition.get("biases", np.zeros((K, C))), dtype=np.float64)
    for name, arr in (("gains", gains), ("biases", biases)):
        if arr.shape != (K, C):
            raise ConfigError(f"expected shape ({K}, {C}), got {arr.shape}", f"partition.{name}")
    if np.any(gains <= 0):
        raise ConfigError("gains must be > 0", "partition.gains")
    clients = []
    for k in range(K):
        tr = np.flatnonzero((assign == k) & ~is_test)
        te = np.flatnonzero((assign == k) & is_test)
        if tr.size == 0:
            raise ConfigError(f"client {k} receives no training records (n_k >= 1 violated)", "partition")
        shift = partition.get("gains") is not None or partition.get("biases") is not None
        tx, sx = images[tr], images[te]
        if shift:
            tx, sx = channel_affine(tx, gains[k], biases[k]), channel_affine(sx, gains[k], biases[k])
        clients.append(ClientDataset(k, tx, labels[tr], sx, labels[te]))
    return FederationData(tuple(clients), tuple(images.shape[1:]), num_classes)


def load_idx_partitioned(path: str | Path, partition_spec: Mapping[str, Any]) -> FederationData:
    images, labels, num_classes = read_fsim(path)
    return partition_records(images, labels, num_classes, partition_spec)


def write_federation(path: str | Path, fed: FederationData) -> dict[str, Any]:
    """Persist every client's records; returns the partition spec that reloads them.

    Pixels are stored as float32, so reloading yields float32-rounded values.
    """
    xs, ys, assignments, splits = [], [], [], []
    for c in fed.clients:
        for split, x, y in (("train", c.train_x, c.train_y), ("test", c.test_x, c.test_y)):
            xs.append(x)
            ys.append(y)
            assignments += [c.client_id] * len(x)
            splits += [split] * len(x)
    images = np.concatenate(xs) if xs else np.zeros((0, *fed.image_shape))
    write_fsim(path, images, np.concatenate(ys), fed.num_classes)
    return {"num_clients": fed.K, "assignments": assignments, "splits": splits}
