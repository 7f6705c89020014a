"""Dense optical flow by exhaustive block matching, and motion weight masks.

The flow estimator is deliberately plain: per-pixel SSD block matching with a
bounded integer search. It is deterministic and dependency-free; any estimator
producing an (F-1, H, W, 2) displacement field can be swapped in upstream of
the weighting step.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import VideoClip
from .errors import ClipTooShort, CorruptRecord, DimensionMismatch, InvalidParam, IoFailure

log = logging.getLogger(__name__)

EPS_BIAS = 1e-6
MASK_MAGIC = b"MVMASK01"

DEFAULT_BLOCK = 5
DEFAULT_RADIUS = 4


@dataclass
class MotionField:
    flow: np.ndarray  # (F-1, H, W, 2): [..., 0] = dw (x), [..., 1] = dh (y)
    confidence: np.ndarray | None = None


@dataclass
class MotionWeights:
    latent_weights: np.ndarray  # (F, H/f, W/f) in [0, 1]
    pixel_weights: np.ndarray | None = None  # (F, H, W); None when loaded from cache
    uniform_fallback: bool = False


def _box_sum(img: np.ndarray, block: int) -> np.ndarray:
    """Sliding block x block sum over an image padded by block//2 on each side."""
    integ = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=integ[1:, 1:])
    return (
        integ[block:, block:]
        - integ[:-block, block:]
        - integ[block:, :-block]
        + integ[:-block, :-block]
    )


def estimate_flow(clip: VideoClip, radius: int = DEFAULT_RADIUS, block: int = DEFAULT_BLOCK) -> MotionField:
    """Frame-to-next-frame displacement by exhaustive SSD block matching.

    Ties are broken toward smaller displacement magnitude (then row, then
    column), so identical frames give an exactly zero field.
    """
    if radius < 1:
        raise InvalidParam(f"radius must be >= 1, got {radius}")
    if block < 1 or block % 2 == 0:
        raise InvalidParam(f"block must be odd and >= 1, got {block}")
    n_frames = clip.frame_count
    if n_frames < 2:
        raise ClipTooShort(f"need >= 2 frames, got {n_frames}")

    gray = clip.frames.mean(axis=3).astype(np.float64)  # (F, H, W)
    height, width = gray.shape[1:]
    bh = block // 2
    pad_next = bh + radius

    candidates = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    candidates.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))

    flow = np.zeros((n_frames - 1, height, width, 2), dtype=np.float64)
    for t in range(n_frames - 1):
        prev = np.pad(gray[t], bh, mode="edge")
        nxt = np.pad(gray[t + 1], pad_next, mode="edge")
        best = np.full((height, width), np.inf)
        best_dx = np.zeros((height, width))
        best_dy = np.zeros((height, width))
        for dy, dx in candidates:
            y0 = pad_next + dy - bh
            x0 = pad_next + dx - bh
            shifted = nxt[y0 : y0 + height + 2 * bh, x0 : x0 + width + 2 * bh]
            ssd = _box_sum((prev - shifted) ** 2, block)
            better = ssd < best
            best = np.where(better, ssd, best)
            best_dx = np.where(better, dx, best_dx)
            best_dy = np.where(better, dy, best_dy)
        flow[t, :, :, 0] = best_dx
        flow[t, :, :, 1] = best_dy
    return MotionField(flow=flow)


def motion_magnitude(field: MotionField) -> np.ndarray:
    return np.hypot(field.flow[..., 0], field.flow[..., 1])


def normalize_weights(
    magnitude: np.ndarray, eps: float = EPS_BIAS, scope: str = "global"
) -> tuple[np.ndarray, bool]:
    """Min-max normalize transition magnitudes into per-frame weights.

    Returns (pixel_weights with F = transitions + 1 frames, uniform_fallback).
    Transition k supplies frame k; the last frame repeats the last transition.
    A constant field would zero every weight under the raw formula, which in
    turn zeroes the masked loss; such clips fall back to all-ones weights so
    they reduce to the standard objective.
    """
    if not np.isfinite(magnitude).all():
        raise InvalidParam("non-finite magnitudes")
    if scope not in ("global", "per_frame"):
        raise InvalidParam(f"unknown normalize scope {scope!r}")
    n_frames = magnitude.shape[0] + 1

    if scope == "global":
        lo, hi = float(magnitude.min()), float(magnitude.max())
        if hi == lo:
            return np.ones((n_frames,) + magnitude.shape[1:]), True
        trans = (magnitude - lo) / (hi - lo + eps)
    else:
        lo = magnitude.min(axis=(1, 2), keepdims=True)
        hi = magnitude.max(axis=(1, 2), keepdims=True)
        flat = (hi == lo)[:, 0, 0]
        if flat.all():
            return np.ones((n_frames,) + magnitude.shape[1:]), True
        trans = (magnitude - lo) / (hi - lo + eps)
        trans[flat] = 1.0
    weights = np.concatenate([trans, trans[-1:]], axis=0)
    return weights, False


def downsample_to_latent(pixel_weights: np.ndarray, factor: int) -> np.ndarray:
    """Area-consistent bilinear downsampling onto the latent grid.

    Each latent cell is the mean of its factor x factor pixel block, which
    preserves constants exactly and keeps values in [0, 1].
    """
    n_frames, height, width = pixel_weights.shape
    if height % factor or width % factor:
        raise DimensionMismatch(f"{height}x{width} not divisible by f={factor}")
    return pixel_weights.reshape(n_frames, height // factor, factor, width // factor, factor).mean(axis=(2, 4))


def motion_weights_for_clip(
    clip: VideoClip,
    factor: int,
    radius: int = DEFAULT_RADIUS,
    block: int = DEFAULT_BLOCK,
    scope: str = "global",
    use_confidence: bool = False,
    field: MotionField | None = None,
) -> MotionWeights:
    """Flow -> magnitude -> normalized weights -> latent grid, in one step."""
    if field is None:
        field = estimate_flow(clip, radius=radius, block=block)
    magnitude = motion_magnitude(field)
    pixel, fallback = normalize_weights(magnitude, scope=scope)
    if use_confidence and field.confidence is not None and not fallback:
        conf = np.concatenate([field.confidence, field.confidence[-1:]], axis=0)
        pixel = pixel * np.clip(conf, 0.0, 1.0)
    latent = downsample_to_latent(pixel, factor)
    return MotionWeights(latent_weights=latent, pixel_weights=pixel, uniform_fallback=fallback)


# --------------------------------------------------------------------------
# mask cache: one file per corpus, records keyed by clip id


class MaskCache:
    """Append-only latent-weight cache; single writer, lookup by clip id."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def create(self):
        try:
            with open(self.path, "wb") as fh:
                fh.write(MASK_MAGIC)
                fh.write(struct.pack("<I", 0))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def append(self, clip_id: int, latent_weights: np.ndarray):
        n_frames, lh, lw = latent_weights.shape
        try:
            with open(self.path, "r+b") as fh:
                magic = fh.read(8)
                if magic != MASK_MAGIC:
                    raise CorruptRecord("bad mask cache magic")
                (count,) = struct.unpack("<I", fh.read(4))
                fh.seek(0, 2)
                fh.write(struct.pack("<QIII", clip_id, n_frames, lh, lw))
                fh.write(latent_weights.astype("<f4").tobytes())
                fh.seek(8)
                fh.write(struct.pack("<I", count + 1))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def load(self) -> dict[int, MotionWeights]:
        out: dict[int, MotionWeights] = {}
        try:
            raw = self.path.read_bytes()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if raw[:8] != MASK_MAGIC:
            raise CorruptRecord("bad mask cache magic")
        (count,) = struct.unpack("<I", raw[8:12])
        pos = 12
        for _ in range(count):
            if pos + 20 > len(raw):
                raise CorruptRecord("truncated mask record header")
            clip_id, n_frames, lh, lw = struct.unpack("<QIII", raw[pos : pos + 20])
            pos += 20
            n_bytes = n_frames * lh * lw * 4
            if pos + n_bytes > len(raw):
                raise CorruptRecord("truncated mask record payload")
            weights = np.frombuffer(raw[pos : pos + n_bytes], dtype="<f4").reshape(n_frames, lh, lw)
            pos += n_bytes
            weights = weights.astype(np.float64)
            out[clip_id] = MotionWeights(
                latent_weights=weights,
                pixel_weights=None,
                uniform_fallback=bool((weights == 1.0).all()),
            )
        return out


def build_mask_cache(
    manifest,
    path: Path,
    factor: int,
    radius: int = DEFAULT_RADIUS,
    block: int = DEFAULT_BLOCK,
    scope: str = "global",
) -> dict[int, MotionWeights]:
    """Compute and persist latent motion weights for every clip in a corpus."""
    cache = MaskCache(path)
    cache.create()
    out = {}
    for clip_id in manifest.clip_ids():
        clip = manifest.load_clip(clip_id)
        weights = motion_weights_for_clip(clip, factor, radius=radius, block=block, scope=scope)
        cache.append(clip_id, weights.latent_weights)
        out[clip_id] = weights
    log.info("mask cache: %d clips -> %s", len(out), path)
    return out
