"""Reciprocal image pairs: (X - M, -k (X - M))."""
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class MeanImage:
    """Image mean, either one value per channel or a full H x W x 3 image."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in ("scalar-per-channel", "full-image"):
            raise ValueError(f"unknown mean mode {self.mode!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if self.mode == "scalar-per-channel" and values.shape != (3,):
            raise ValueError(f"per-channel mean needs 3 values, got shape {values.shape}")
        if self.mode == "full-image" and (values.ndim != 3 or values.shape[-1] != 3):
            raise ValueError(f"full-image mean must be H x W x 3, got shape {values.shape}")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("mean values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, r: float, g: float, b: float) -> "MeanImage":
        return cls("scalar-per-channel", np.array([r, g, b]))

    def as_array(self, like: Array) -> Array:
        """Mean broadcastable against ``like`` (H x W x 3 or N x H x W x 3)."""
        if isinstance(like, torch.Tensor):
            return torch.as_tensor(self.values, dtype=like.dtype, device=like.device)
        return self.values.astype(like.dtype, copy=False)


@dataclass(frozen=True)
class ReciprocalPair:
    origin: Array
    reflected: Array
    scale: float


def compute_dataset_mean(images: Iterable[Array]) -> MeanImage:
    """Per-channel mean over every pixel of every image (H x W x 3 each)."""
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for img in images:
        arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ValueError(f"expected H x W x 3 image, got shape {arr.shape}")
        total += arr.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += arr.shape[0] * arr.shape[1]
    if count == 0:
        raise ValueError("cannot compute the mean of an empty dataset")
    return MeanImage("scalar-per-channel", total / count)


def reflect(x: Array, mean: MeanImage, k: float = 1.0) -> ReciprocalPair:
    """Build the reciprocal pair of ``x`` (channels last) about ``mean``.

    ``reflected`` is computed as ``-k * origin`` so that
    ``reflected + k * origin == 0`` holds exactly.
    """
    if not k > 0:
        raise ValueError(f"reflection scale must be positive, got {k}")
    if x.shape[-1] != 3:
        raise ValueError(f"expected channels-last RGB input, got shape {tuple(x.shape)}")
    m = mean.as_array(x)
    if mean.mode == "full-image" and tuple(x.shape[-3:]) != tuple(m.shape):
        raise ValueError(f"mean image shape {tuple(m.shape)} does not match input {tuple(x.shape)}")
    origin = x - m
    reflected = -k * origin
    return ReciprocalPair(origin, reflected, float(k))
