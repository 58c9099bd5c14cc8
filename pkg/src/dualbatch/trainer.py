"""Desk-scale learner driven by the parameter server.

The network is conv3x3 -> ReLU -> conv3x3 -> ReLU -> global average pool ->
dropout -> dense -> softmax, written directly in numpy with hand-derived
gradients. Global pooling keeps the parameter count independent of input
resolution, so the same weights train at every rung of a resolution ladder.
Everything runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadResolution, NonFiniteActivation, NonFiniteGradient, PlanExceedsData
from .memory_model import MIB, MemorySample
from .planner import AllocationPlan, FleetSpec

DATASET_MAGIC = b"DBDS"
_HEADER = struct.Struct("<4sIII")


# --------------------------------------------------------------------------- data


@dataclass(eq=False)
class SyntheticDataset:
    images: np.ndarray  # (N, r_max, r_max) float32
    labels: np.ndarray  # (N,) int32
    class_count: int
    base_resolution: int
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def at_resolution(self, resolution: int) -> np.ndarray:
        """All images pooled to ``resolution``, as float64. Cached."""
        if resolution not in self._cache:
            self._cache[resolution] = downsample(self.images.astype(np.float64), resolution)
        return self._cache[resolution]

    def equals(self, other: "SyntheticDataset") -> bool:
        return (
            self.class_count == other.class_count
            and self.base_resolution == other.base_resolution
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


def generate(
    seed: int, n: int, classes: int, r_max: int, noise: float = 0.1, contrast: float = 5.0
) -> SyntheticDataset:
    """Class-conditional images of oriented Gaussian bumps plus pixel noise.

    Class ``c`` draws three elongated bumps at random positions, all oriented
    at ``pi * c / classes``; orientation survives global pooling, so the
    pooled conv features separate the classes. ``noise`` is relative to the
    bump height ``contrast``.
    """
    if classes < 2 or n < classes:
        raise ValueError("need n >= classes >= 2")
    if r_max < 8:
        raise ValueError("r_max must be >= 8")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int32)
    grid = (np.arange(r_max) + 0.5) / r_max
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    bumps = 3
    angle = np.pi * labels / classes + rng.normal(0.0, 0.05, n)
    centres = rng.uniform(0.2, 0.8, (n, bumps, 2))
    amp = contrast * rng.uniform(0.8, 1.2, (n, bumps))
    cos = np.cos(angle)[:, None, None, None]
    sin = np.sin(angle)[:, None, None, None]
    dy = yy[None, None] - centres[..., 0, None, None]
    dx = xx[None, None] - centres[..., 1, None, None]
    along = dx * cos + dy * sin
    across = -dx * sin + dy * cos
    long_sigma, short_sigma = 0.18, 0.045
    field_ = np.exp(-0.5 * ((along / long_sigma) ** 2 + (across / short_sigma) ** 2))
    images = (amp[..., None, None] * field_).sum(axis=1)
    images += rng.normal(0.0, noise * contrast, images.shape)
    return SyntheticDataset(images.astype(np.float32), labels, classes, r_max, seed)


def _pool_matrix(source: int, target: int) -> np.ndarray:
    """Row ``i`` holds the area weights of source pixels inside target pixel ``i``."""
    scale = source / target
    lo = np.arange(target)[:, None] * scale
    hi = lo + scale
    left = np.arange(source)[None, :]
    overlap = np.clip(np.minimum(hi, left + 1) - np.maximum(lo, left), 0.0, None)
    return overlap / scale


def downsample(image: np.ndarray, resolution: int) -> np.ndarray:
    """Area-average pooling of the last two axes down to ``resolution``.

    Works for any target no larger than the source; when the target does
    not divide the source, boundary pixels are split by area.
    """
    source = image.shape[-1]
    if image.shape[-2] != source:
        raise BadResolution("images must be square")
    if resolution < 1 or resolution > source:
        raise BadResolution(f"cannot pool {source}px to {resolution}px")
    if resolution == source:
        return np.array(image, dtype=np.float64, copy=True)
    pool = _pool_matrix(source, resolution)
    return np.einsum("ij,...jk,lk->...il", pool, image, pool, optimize=True)


def save_dataset(path: str | Path, dataset: SyntheticDataset) -> None:
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, n, dataset.class_count, dataset.base_resolution))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())


def load_dataset(path: str | Path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    magic, n, classes, r_max = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
    offset = _HEADER.size
    pixels = n * r_max * r_max
    images = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset).reshape(n, r_max, r_max)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset + 4 * pixels)
    return SyntheticDataset(images.astype(np.float32), labels.astype(np.int32), classes, r_max)


# --------------------------------------------------------------------------- network


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, C*9) patches of a 3x3 same-padded conv."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(b, h, w, c * 9)


def _col2im(dcols: np.ndarray, channels: int) -> np.ndarray:
    b, h, w, _ = dcols.shape
    d = dcols.reshape(b, h, w, channels, 3, 3)
    out = np.zeros((b, h + 2, w + 2, channels))
    for ky in range(3):
        for kx in range(3):
            out[:, ky:ky + h, kx:kx + w, :] += d[..., ky, kx]
    return out[:, 1:-1, 1:-1, :]


@dataclass(frozen=True)
class ConvNet:
    classes: int
    conv1: int = 8
    conv2: int = 12

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (self.conv1, 1, 3, 3),
            "conv1_b": (self.conv1,),
            "conv2_w": (self.conv2, self.conv1, 3, 3),
            "conv2_b": (self.conv2,),
            "dense_w": (self.conv2, self.classes),
            "dense_b": (self.classes,),
        }

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {params.shape}")
        out, pos = {}, 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[name] = params[pos:pos + size].reshape(shape)
            pos += size
        return out

    def layer_slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[name] = slice(pos, pos + size)
            pos += size
        return out

    def init_params(self, seed: int) -> np.ndarray:
        return np.random.default_rng([seed, 0x1417]).uniform(-0.1, 0.1, self.param_count)

    def forward(self, params, images, dropout_rate=0.0, mode="eval", rng=None):
        """Logits for a batch of ``(B, r, r)`` images plus the cache for backprop."""
        p = self.unpack(params)
        x = np.asarray(images, dtype=np.float64)[..., None]
        cols1 = _im2col(x)
        z1 = cols1 @ p["conv1_w"].reshape(self.conv1, -1).T + p["conv1_b"]
        a1 = np.maximum(z1, 0.0)
        cols2 = _im2col(a1)
        z2 = cols2 @ p["conv2_w"].reshape(self.conv2, -1).T + p["conv2_b"]
        a2 = np.maximum(z2, 0.0)
        pooled = a2.mean(axis=(1, 2))
        mask = None
        if mode == "train" and dropout_rate > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - dropout_rate
            mask = (rng.random(pooled.shape) < keep) / keep
            hidden = pooled * mask
        elif mode in ("train", "eval"):
            hidden = pooled
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        logits = hidden @ p["dense_w"] + p["dense_b"]
        if not np.isfinite(logits).all():
            raise NonFiniteActivation("non-finite logits")
        cache = dict(cols1=cols1, z1=z1, cols2=cols2, z2=z2, hidden=hidden, mask=mask)
        return logits, cache

    def loss_and_grad(self, params, images, labels, dropout_rate=0.0, rng=None):
        """Mean cross-entropy over the batch and its gradient w.r.t. ``params``."""
        p = self.unpack(params)
        logits, c = self.forward(params, images, dropout_rate, "train", rng)
        labels = np.asarray(labels)
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(log_z - shifted[np.arange(n), labels]))

        dlogits = np.exp(shifted - log_z[:, None])
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads = {
            "dense_w": c["hidden"].T @ dlogits,
            "dense_b": dlogits.sum(axis=0),
        }
        dpooled = dlogits @ p["dense_w"].T
        if c["mask"] is not None:
            dpooled = dpooled * c["mask"]
        _, h, w, _ = c["z2"].shape
        dz2 = np.broadcast_to(dpooled[:, None, None, :] / (h * w), c["z2"].shape) * (c["z2"] > 0)
        grads["conv2_w"] = (dz2.reshape(-1, self.conv2).T @ c["cols2"].reshape(-1, self.conv1 * 9)
                            ).reshape(self.shapes["conv2_w"])
        grads["conv2_b"] = dz2.sum(axis=(0, 1, 2))
        da1 = _col2im(dz2 @ p["conv2_w"].reshape(self.conv2, -1), self.conv1)
        dz1 = da1 * (c["z1"] > 0)
        grads["conv1_w"] = (dz1.reshape(-1, self.conv1).T @ c["cols1"].reshape(-1, 9)
                            ).reshape(self.shapes["conv1_w"])
        grads["conv1_b"] = dz1.sum(axis=(0, 1, 2))
        flat = np.concatenate([grads[name].ravel() for name in self.shapes])
        if not np.isfinite(flat).all():
            raise NonFiniteGradient("non-finite gradient")
        return loss, flat

    def evaluate(self, params, images, labels, chunk: int = 256) -> tuple[float, float]:
        """Eval-mode mean cross-entropy and accuracy."""
        total_loss = 0.0
        correct = 0
        for start in range(0, len(labels), chunk):
            x = images[start:start + chunk]
            y = np.asarray(labels[start:start + chunk])
            logits, _ = self.forward(params, x, mode="eval")
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_z = np.log(np.exp(shifted).sum(axis=1))
            total_loss += float(np.sum(log_z - shifted[np.arange(len(y)), y]))
            correct += int(np.sum(logits.argmax(axis=1) == y))
        return total_loss / len(labels), correct / len(labels)

    def activation_elements(self, resolution: int) -> int:
        """float64 elements held per sample by one forward+backward pass."""
        r2 = resolution * resolution
        c1, c2, k = self.conv1, self.conv2, self.classes
        forward = r2 * (1 + 9 + 2 * c1 + 9 * c1 + 2 * c2) + 2 * c2 + 2 * k
        backward = r2 * (c2 + 9 * c1 + c1) + c1 * (resolution + 2) ** 2
        return forward + backward

    def memory_bytes(self, resolution: int, batch_size: int, element_bytes: int = 8) -> int:
        """Accounted peak bytes: weights, gradient and pull snapshot, plus activations."""
        fixed = 3 * self.param_count
        return element_bytes * (fixed + batch_size * self.activation_elements(resolution))


def forward(net: ConvNet, params, images, dropout_rate=0.0, mode="eval", rng=None):
    return net.forward(params, images, dropout_rate, mode, rng)


def loss_and_grad(net: ConvNet, params, images, labels, dropout_rate=0.0, rng=None):
    return net.loss_and_grad(params, images, labels, dropout_rate, rng)


def sgd_step(params: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * gradient


def memory_profile(
    net: ConvNet,
    resolution: int,
    batch_sizes: Sequence[int],
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[MemorySample]:
    """Accounted memory in MiB at each batch size, optionally with multiplicative noise."""
    out = []
    for bs in batch_sizes:
        mib = net.memory_bytes(resolution, bs) / MIB
        if noise:
            mib *= 1.0 + rng.uniform(-noise, noise)
        out.append(MemorySample(bs, mib))
    return out


# --------------------------------------------------------------------------- sharding


@dataclass(frozen=True)
class Shard:
    worker_id: int
    role: str
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


def shard(
    dataset: SyntheticDataset | int,
    plan: AllocationPlan,
    fleet: FleetSpec | None = None,
    epoch: int = 1,
    seed: int = 0,
) -> list[Shard]:
    """Shuffle with an epoch-specific seed and cut contiguous per-worker slices.

    Large-batch workers come first (ids ``0..n_L-1``), then small-batch ones.
    Leftover samples from floor rounding sit out this epoch.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    if fleet is not None and (fleet.n_small, fleet.n_large) != (plan.n_small, plan.n_large):
        raise ValueError("fleet and plan disagree on worker counts")
    if plan.assigned > n:
        raise PlanExceedsData(f"plan assigns {plan.assigned} samples but dataset has {n}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    shards, pos = [], 0
    for worker_id, role in enumerate(plan.roles()):
        size = plan.data_for(role)
        shards.append(Shard(worker_id, role, order[pos:pos + size]))
        pos += size
    return shards


def batches(indices: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def worker_rng(seed: int, worker_id: int, epoch: int) -> np.random.Generator:
    """Dropout stream for one worker in one epoch."""
    return np.random.default_rng([seed, worker_id, epoch, 0xD0])


# --------------------------------------------------------------------------- gradient statistics


@dataclass(frozen=True)
class GradientStats:
    batch_size: int
    sample_mean: np.ndarray
    variance: np.ndarray
    draw_count: int

    @property
    def mean_variance(self) -> float:
        return float(self.variance.mean())


def gradient_variance_scan(
    net: ConvNet,
    params: np.ndarray,
    dataset: SyntheticDataset,
    batch_sizes: Sequence[int],
    draws: int,
    seed: int,
    resolution: int | None = None,
    replace: bool = True,
) -> list[GradientStats]:
    """Per-coordinate spread of the mini-batch gradient at fixed ``params``.

    Each draw samples a batch (with replacement by default), so the variance
    of the batch-mean gradient should fall like ``1/N``.
    """
    images = dataset.at_resolution(resolution or dataset.base_resolution)
    rng = np.random.default_rng([seed, 0x5CA7])
    out = []
    for bs in batch_sizes:
        grads = np.empty((draws, net.param_count))
        for i in range(draws):
            if replace:
                idx = rng.integers(0, len(dataset), bs)
            else:
                idx = rng.permutation(len(dataset))[:bs]
            _, grads[i] = net.loss_and_grad(params, images[idx], dataset.labels[idx])
        out.append(GradientStats(bs, grads.mean(axis=0), grads.var(axis=0, ddof=1), draws))
    return out
