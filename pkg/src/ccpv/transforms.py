"""Image preprocessing and the horizontal flip used by the four-matching rule."""

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateImage

STD_EPS = 1e-6


def flip(img):
    """Horizontal mirror: ``out[r, c] = img[r, W - 1 - c]``.

    Works on ``(H, W)`` and channel-last ``(H, W, C)`` numpy arrays. For
    torch tensors the last axis is treated as width, so ``(N, C, H, W)``
    batches are mirrored per image.
    """
    if isinstance(img, torch.Tensor):
        return torch.flip(img, dims=(-1,))
    img = np.asarray(img)
    return np.ascontiguousarray(img[:, ::-1, ...])


def _to_unit_range(img):
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / np.iinfo(img.dtype).max
    if img.dtype == np.bool_:
        return img.astype(np.float64)
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def resize(img, target_side):
    """Bilinear resize of a float image to ``target_side`` x ``target_side``."""
    h, w = img.shape[:2]
    if (h, w) == (target_side, target_side):
        return img
    chw = img[None, None] if img.ndim == 2 else np.moveaxis(img, -1, 0)[None]
    t = torch.from_numpy(np.ascontiguousarray(chw))
    out = F.interpolate(t, size=(target_side, target_side), mode="bilinear", align_corners=False)
    out = out[0].numpy()
    return out[0] if img.ndim == 2 else np.moveaxis(out, 0, -1)


def preprocess(img, target_side, standardize=False):
    """Scale to [0, 1], resize to a square of ``target_side`` and optionally standardize.

    Integer images are divided by their dtype maximum; float images are
    assumed to already be intensities and are clipped to [0, 1].
    Standardization divides by ``max(std, 1e-6)`` so constant images map to zeros.
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise DegenerateImage(f"cannot preprocess image of shape {img.shape}")
    if target_side < 1:
        raise DegenerateImage(f"target side must be positive, got {target_side}")
    out = resize(_to_unit_range(img), target_side)
    if not np.all(np.isfinite(out)):
        raise DegenerateImage("image contains non-finite values")
    if standardize:
        # resampling round-off must not turn a flat image into noise
        if np.ptp(img) == 0:
            return np.zeros_like(out)
        out = (out - out.mean()) / max(out.std(), STD_EPS)
    return out


def to_tensor(images, dtype=torch.float32):
    """Stack preprocessed 2-D images into an ``(N, 1, H, W)`` tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim == 4:
        arr = np.moveaxis(arr, -1, 1)
    return torch.as_tensor(arr, dtype=dtype)
