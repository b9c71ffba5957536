"""Dataset ingestion: a synthetic 10-class image set and a CIFAR-10 loader.

The synthetic set draws each class as a smooth random prototype field;
samples add spatial jitter, brightness jitter, and pixel noise. Everything
is generated from a dedicated torch.Generator so ingestion is deterministic
given the seed and never disturbs global RNG state.
"""

from __future__ import annotations

import hashlib
import math
import pickle
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    root: str | None = None
    n_samples: int = 5700
    num_classes: int = 10
    image_size: int = 32
    val_fraction: float = 0.1
    seed: int = 0
    checksums: dict | None = None

    def __post_init__(self):
        if self.name not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset {self.name!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class DatasetSplits:
    train_images: torch.Tensor
    train_labels: torch.Tensor
    val_images: torch.Tensor
    val_labels: torch.Tensor
    num_classes: int

    @property
    def n_train(self) -> int:
        return self.train_images.shape[0]

    @property
    def n_val(self) -> int:
        return self.val_images.shape[0]


def split_counts(n: int, val_fraction: float) -> tuple[int, int]:
    """Train/val sizes; the validation count is floored."""
    n_val = math.floor(n * val_fraction)
    return n - n_val, n_val


def synthetic_blobs(
    n_samples: int,
    num_classes: int = 10,
    image_size: int = 32,
    seed: int = 0,
    signal_amplitude: float = 0.12,
    background_amplitude: float = 0.10,
    noise_std: float = 0.06,
    kernel_similarity: float = 0.55,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-conditional stationary Gaussian textures over nuisance backgrounds.

    Each class is a local correlation structure: a fixed random 3x3 color
    kernel convolved with per-sample white noise. The resulting texture is
    translation-stationary (flip/crop augmentation preserves the class
    statistic) and lives at a spatial scale that coarse tile perturbations
    cannot express. ``kernel_similarity`` blends a shared kernel into every
    class so accuracy is limited by class confusability rather than pixel
    noise. The low-frequency random background and the pixel noise carry no
    label information.
    """
    gen = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_samples) % num_classes
    labels = labels[torch.randperm(n_samples, generator=gen)]

    shared = torch.randn(1, 3, 3, 3, 3, generator=gen)
    kernels = torch.randn(num_classes, 3, 3, 3, 3, generator=gen)
    kernels = kernel_similarity * shared + (1.0 - kernel_similarity) * kernels
    white = torch.randn(n_samples, 3, image_size, image_size, generator=gen)
    texture = torch.empty_like(white)
    for c in range(num_classes):
        mask = labels == c
        padded = F.pad(white[mask], (1, 1, 1, 1), mode="circular")
        texture[mask] = F.conv2d(padded, kernels[c])
    texture = texture - texture.mean(dim=(1, 2, 3), keepdim=True)
    texture = texture / texture.flatten(1).std(dim=1).reshape(-1, 1, 1, 1)

    coarse = torch.randn(n_samples, 3, 4, 4, generator=gen)
    background = F.interpolate(coarse, size=(image_size, image_size), mode="bilinear",
                               align_corners=False)
    x = 0.5 + signal_amplitude * texture + background_amplitude * background
    x = x + noise_std * torch.randn(n_samples, 3, image_size, image_size, generator=gen)
    return x.clamp(0.0, 1.0), labels.to(torch.int64)


def load_cifar10(root: str, checksums: dict | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Read the python-pickle batch files from a local CIFAR-10 directory."""
    base = Path(root)
    names = [f"data_batch_{i}" for i in range(1, 6)]
    missing = [n for n in names if not (base / n).exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files under {base}: {', '.join(missing)}")
    if checksums:
        for n in names:
            if n in checksums:
                digest = hashlib.md5((base / n).read_bytes()).hexdigest()
                if digest != checksums[n]:
                    raise ValueError(f"checksum mismatch for {n}: {digest} != {checksums[n]}")
    xs, ys = [], []
    for n in names:
        with open(base / n, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        data = torch.frombuffer(bytearray(batch[b"data"]), dtype=torch.uint8)
        xs.append(data.reshape(-1, 3, 32, 32).to(torch.float32) / 255.0)
        ys.append(torch.tensor(batch[b"labels"], dtype=torch.int64))
    return torch.cat(xs), torch.cat(ys)


def ingest_dataset(cfg: DatasetConfig) -> DatasetSplits:
    """Materialize images in [0, 1] and split deterministically by seed."""
    if cfg.name == "synthetic":
        images, labels = synthetic_blobs(
            cfg.n_samples, cfg.num_classes, cfg.image_size, seed=cfg.seed
        )
        num_classes = cfg.num_classes
    else:
        if cfg.root is None:
            raise FileNotFoundError("cifar10 requires dataset.root pointing at the batch files")
        images, labels = load_cifar10(cfg.root, cfg.checksums)
        num_classes = 10
    gen = torch.Generator().manual_seed(cfg.seed)
    order = torch.randperm(images.shape[0], generator=gen)
    images, labels = images[order], labels[order]
    n_train, n_val = split_counts(images.shape[0], cfg.val_fraction)
    return DatasetSplits(
        train_images=images[:n_train],
        train_labels=labels[:n_train],
        val_images=images[n_train:],
        val_labels=labels[n_train:],
        num_classes=num_classes,
    )


def augment_batch(x: torch.Tensor, pad: int = 4) -> torch.Tensor:
    """Horizontal flip + pad-and-crop, drawn from the global torch RNG."""
    n, _, h, w = x.shape
    flip = torch.rand(n) < 0.5
    x = torch.where(flip.reshape(-1, 1, 1, 1), x.flip(-1), x)
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    ox = torch.randint(0, 2 * pad + 1, (n,))
    oy = torch.randint(0, 2 * pad + 1, (n,))
    out = torch.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out
