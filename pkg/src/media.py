"""Grayscale frame ingestion and latent preview export."""

import logging
import math
from pathlib import Path
from typing import List, Sequence, Union

import cv2
import numpy as np

from .numerics import DimensionError, Tensor

logger = logging.getLogger(__name__)


def read_pgm_frames(paths: Sequence[Union[str, Path]]) -> List[np.ndarray]:
    """
    Load 8-bit grayscale frames (PGM or any format OpenCV reads).

    Raises:
        OSError: If a frame is missing or unreadable
        DimensionError: If frames differ in size
    """
    frames = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"frame not found: {path}")
        image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if image is None:
            raise OSError(f"cannot decode frame: {path}")
        if frames and image.shape != frames[0].shape:
            raise DimensionError(f"frame {path} is {image.shape}, expected {frames[0].shape}")
        frames.append(image)
    return frames


def _normalize_u8(frame: np.ndarray) -> np.ndarray:
    lo, hi = float(frame.min()), float(frame.max())
    if hi <= lo:
        return np.zeros(frame.shape, dtype=np.uint8)
    return np.rint((frame - lo) / (hi - lo) * 255.0).astype(np.uint8)


def preview_sheet(latents: Tensor) -> np.ndarray:
    """Tile every frame's channel 0, min-max normalized, into one 8-bit image."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise DimensionError(f"latents must be [frames, channels, h, w], got {latents.shape}")
    t, _, h, w = latents.shape
    cols = math.ceil(math.sqrt(t))
    rows = math.ceil(t / cols)
    sheet = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(t):
        r, c = divmod(i, cols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = _normalize_u8(latents[i, 0])
    return sheet


def write_preview_sheet(latents: Tensor, path: Union[str, Path]) -> Path:
    """Write the preview contact sheet as a binary PGM (P5) file."""
    path = Path(path)
    sheet = preview_sheet(latents)
    # OpenCV picks the encoder from the suffix
    encoded_ok, buffer = cv2.imencode(".pgm", sheet, [cv2.IMWRITE_PXM_BINARY, 1])
    if not encoded_ok:
        raise OSError(f"cannot encode preview sheet for {path}")
    path.write_bytes(buffer.tobytes())
    logger.info(f"Preview sheet written to {path} ({sheet.shape[1]}x{sheet.shape[0]})")
    return path
