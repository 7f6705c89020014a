"""Tiny latent video generative model with exact hand-coded gradients.

Pieces:

* PatchEncoder   -- frozen analytic encoder: per-frame f x f patches projected
                    by a seeded random orthonormal matrix into c channels.
* LinearScheduler-- x_t = a(t) z + b(t) eps with a = 1 - t/T, b = t/T.
* GenModel       -- time- and category-conditioned predictor over the latent
                    grid, trained to predict either the injected noise
                    ("diffusion") or the interpolant velocity eps - z
                    ("flow_matching").

The predictor is: per-frame linear embedding (latent cells + sinusoidal time
features) -> 3-tap temporal convolution across frames -> tanh -> linear head
back to the latent grid. The temporal stage is a convolution rather than a
dense frame-count-specific mixer so the same parameters apply to clips of any
length, which the frame-length study requires. Reverse-mode gradients are
written out by hand so the flat parameter layout is explicit and stable; all
math is float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import CATEGORIES, VideoClip
from .errors import (
    DimensionMismatch,
    DivergedLoss,
    InvalidParam,
    IoFailure,
    NonFiniteActivation,
    CorruptRecord,
)
from .motion import MotionWeights

CHECKPOINT_MAGIC = b"MVPARM01"


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    patch: int = 4  # spatial downsample factor f
    latent_c: int = 4
    hidden: int = 120
    n_categories: int = len(CATEGORIES)
    n_time_features: int = 8
    total_timesteps: int = 1000
    objective: str = "flow_matching"  # or "diffusion"
    encoder_seed: int = 2024

    def __post_init__(self):
        if self.objective not in ("flow_matching", "diffusion"):
            raise InvalidParam(f"unknown objective {self.objective!r}")
        if self.height % self.patch or self.width % self.patch:
            raise DimensionMismatch("H, W must be divisible by the patch size")

    @property
    def latent_h(self) -> int:
        return self.height // self.patch

    @property
    def latent_w(self) -> int:
        return self.width // self.patch

    @property
    def frame_dim(self) -> int:
        return self.latent_h * self.latent_w * self.latent_c

    @property
    def in_dim(self) -> int:
        return self.frame_dim + self.n_time_features


class PatchEncoder:
    """Frozen linear encoder: f x f x C patches -> c channels, orthonormal rows."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        if cfg.latent_c > patch_dim:
            raise DimensionMismatch("latent_c cannot exceed the patch dimension")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=cfg.encoder_seed)))
        gauss = rng.standard_normal((patch_dim, patch_dim))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
        self.matrix = q[: cfg.latent_c]  # (c, f*f*C)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        n_frames, height, width, channels = frames.shape
        if (height, width, channels) != (cfg.height, cfg.width, cfg.channels):
            raise DimensionMismatch(
                f"expected {cfg.height}x{cfg.width}x{cfg.channels}, got {height}x{width}x{channels}"
            )
        f = cfg.patch
        patches = frames.reshape(n_frames, cfg.latent_h, f, cfg.latent_w, f, channels)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(n_frames, cfg.latent_h, cfg.latent_w, -1)
        return patches.astype(np.float64) @ self.matrix.T

    def encode_clip(self, clip: VideoClip) -> np.ndarray:
        return self.encode(clip.frames)


class LinearScheduler:
    """Linear interpolant noise schedule on t in [0, T]."""

    def __init__(self, total_timesteps: int = 1000):
        self.total_timesteps = total_timesteps

    def a(self, t) -> float:
        return 1.0 - t / self.total_timesteps

    def b(self, t) -> float:
        return t / self.total_timesteps


@dataclass
class ParamLayout:
    """Named views into the flat parameter vector."""

    cfg: ModelConfig
    slices: dict = field(default_factory=dict)
    dim: int = 0

    def __post_init__(self):
        cfg = self.cfg
        shapes = {
            "emb": (cfg.n_categories, cfg.latent_c),
            "w1": (cfg.hidden, cfg.in_dim),
            "b1": (cfg.hidden,),
            "wt": (3, cfg.hidden, cfg.hidden),
            "bt": (cfg.hidden,),
            "w2": (cfg.frame_dim, cfg.hidden),
            "b2": (cfg.frame_dim,),
        }
        off = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = (off, off + size, shape)
            off += size
        self.dim = off

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self.slices[name]
        return theta[lo:hi].reshape(shape)

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.view(theta, name) for name in self.slices}


@dataclass
class TrainConfig:
    steps: int = 600
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0


class GenModel:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        self.encoder = PatchEncoder(self.cfg)
        self.scheduler = LinearScheduler(self.cfg.total_timesteps)
        self.layout = ParamLayout(self.cfg)

    # ------------------------------------------------------------------ core

    @property
    def n_params(self) -> int:
        return self.layout.dim

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(7,))))
        theta = np.zeros(self.layout.dim)
        p = self.layout.unpack(theta)
        p["emb"][:] = 0.1 * rng.standard_normal(p["emb"].shape)
        p["w1"][:] = rng.standard_normal(p["w1"].shape) / np.sqrt(self.cfg.in_dim)
        p["wt"][:] = rng.standard_normal(p["wt"].shape) / np.sqrt(3 * self.cfg.hidden)
        p["w2"][:] = rng.standard_normal(p["w2"].shape) / np.sqrt(self.cfg.hidden)
        return theta

    def encode(self, clip: VideoClip) -> np.ndarray:
        return self.encoder.encode_clip(clip)

    def forward_noise(self, z: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
        if z.shape != eps.shape:
            raise DimensionMismatch("latent and noise shapes differ")
        if not 0 <= t <= self.scheduler.total_timesteps:
            raise InvalidParam(f"t={t} outside [0, {self.scheduler.total_timesteps}]")
        return self.scheduler.a(t) * z + self.scheduler.b(t) * eps

    def time_features(self, t: float) -> np.ndarray:
        s = t / self.cfg.total_timesteps
        freqs = 2.0 ** np.arange(self.cfg.n_time_features // 2)  # 1, 2, 4, ...
        ang = 2 * np.pi * s * 0.5 * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)])

    def target_for(self, z: np.ndarray, eps: np.ndarray, objective: str | None = None) -> np.ndarray:
        obj = objective or self.cfg.objective
        if obj == "diffusion":
            return eps
        return eps - z

    def _forward(self, theta: np.ndarray, x_t: np.ndarray, cond: int, t: float):
        cfg = self.cfg
        p = self.layout.unpack(theta)
        n_frames = x_t.shape[0]
        u = x_t + p["emb"][cond]
        v = u.reshape(n_frames, cfg.frame_dim)
        tf = self.time_features(t)
        vin = np.concatenate([v, np.broadcast_to(tf, (n_frames, tf.size))], axis=1)
        act = vin @ p["w1"].T + p["b1"]  # (F, hidden)
        act_prev = np.vstack([np.zeros((1, cfg.hidden)), act[:-1]])
        act_next = np.vstack([act[1:], np.zeros((1, cfg.hidden))])
        pre = act_prev @ p["wt"][0].T + act @ p["wt"][1].T + act_next @ p["wt"][2].T + p["bt"]
        mid = np.tanh(pre)
        out = mid @ p["w2"].T + p["b2"]
        cache = (p, vin, act, act_prev, act_next, mid, cond, n_frames)
        return out.reshape(n_frames, cfg.latent_h, cfg.latent_w, cfg.latent_c), cache

    def predict(self, theta: np.ndarray, x_t: np.ndarray, cond: int, t: float) -> np.ndarray:
        out, _ = self._forward(theta, x_t, cond, t)
        if not np.isfinite(out).all():
            raise NonFiniteActivation("prediction contains non-finite values")
        return out

    def _backward(self, d_out: np.ndarray, cache) -> np.ndarray:
        cfg = self.cfg
        p, vin, act, act_prev, act_next, mid, cond, n_frames = cache
        grad = np.zeros(self.layout.dim)
        g = self.layout.unpack(grad)
        d_y = d_out.reshape(n_frames, cfg.frame_dim)

        g["w2"][:] = d_y.T @ mid
        g["b2"][:] = d_y.sum(axis=0)
        d_mid = d_y @ p["w2"]
        d_pre = d_mid * (1.0 - mid * mid)

        g["wt"][0] = d_pre.T @ act_prev
        g["wt"][1] = d_pre.T @ act
        g["wt"][2] = d_pre.T @ act_next
        g["bt"][:] = d_pre.sum(axis=0)

        d_act = d_pre @ p["wt"][1]
        d_act[:-1] += d_pre[1:] @ p["wt"][0]  # act[k] feeds pre[k+1] through tap 0
        d_act[1:] += d_pre[:-1] @ p["wt"][2]  # act[k] feeds pre[k-1] through tap 2

        g["w1"][:] = d_act.T @ vin
        g["b1"][:] = d_act.sum(axis=0)
        d_vin = d_act @ p["w1"]
        d_u = d_vin[:, : cfg.frame_dim].reshape(n_frames, cfg.latent_h, cfg.latent_w, cfg.latent_c)
        g["emb"][cond] = d_u.sum(axis=(0, 1, 2))
        return grad

    # ------------------------------------------------------------ objectives

    def loss_and_grad(
        self,
        theta: np.ndarray,
        z: np.ndarray,
        cond: int,
        t: float,
        eps: np.ndarray,
        weights: np.ndarray | None = None,
        objective: str | None = None,
    ) -> tuple[float, np.ndarray]:
        """Mean over every (frame, i, j, channel) component of w * (pred - target)^2.

        `weights` is a per-location (F, h, w) mask broadcast over channels;
        None means the unweighted objective. No frame-count factor is applied
        here; callers own the 1/F conventions.
        """
        x_t = self.forward_noise(z, t, eps)
        out, cache = self._forward(theta, x_t, cond, t)
        if not np.isfinite(out).all():
            raise NonFiniteActivation("prediction contains non-finite values")
        delta = out - self.target_for(z, eps, objective)
        if weights is None:
            loss = float(np.mean(delta * delta))
            d_out = 2.0 * delta / delta.size
        else:
            if weights.shape != delta.shape[:3]:
                raise DimensionMismatch(f"weights {weights.shape} vs latent grid {delta.shape[:3]}")
            w = weights[..., None]
            loss = float(np.mean(w * delta * delta))
            d_out = 2.0 * w * delta / delta.size
        return loss, self._backward(d_out, cache)

    def diffusion_loss(self, theta, clip: VideoClip, cond: int, t: float, eps: np.ndarray) -> float:
        z = self.encode(clip)
        delta = self.predict(theta, self.forward_noise(z, t, eps), cond, t) - eps
        return float(np.mean(delta * delta))

    def flow_matching_loss(self, theta, clip: VideoClip, cond: int, t: float, eps: np.ndarray) -> float:
        z = self.encode(clip)
        delta = self.predict(theta, self.forward_noise(z, t, eps), cond, t) - (eps - z)
        return float(np.mean(delta * delta))

    def per_location_error(self, theta, clip: VideoClip, cond: int, t: float, eps: np.ndarray) -> np.ndarray:
        """Squared error summed over channels at each (frame, i, j)."""
        z = self.encode(clip)
        delta = self.predict(theta, self.forward_noise(z, t, eps), cond, t) - self.target_for(z, eps)
        return (delta * delta).sum(axis=3)

    def motion_weighted_loss(
        self,
        theta,
        clip: VideoClip,
        cond: int,
        weights: MotionWeights | np.ndarray,
        t: float,
        eps: np.ndarray,
    ) -> float:
        """(1/F) x weighted mean componentwise squared error.

        With all-ones weights this is exactly (1/F) x the unweighted MSE, so
        F x motion_weighted_loss recovers the standard objective.
        """
        w = weights.latent_weights if isinstance(weights, MotionWeights) else weights
        z = self.encode(clip)
        if w.shape != z.shape[:3]:
            raise DimensionMismatch(f"weights {w.shape} vs latent grid {z.shape[:3]}")
        delta = self.predict(theta, self.forward_noise(z, t, eps), cond, t) - self.target_for(z, eps)
        n_frames = clip.frame_count
        return float(np.mean(w[..., None] * delta * delta)) / n_frames

    def unmasked_loss(self, theta, clip: VideoClip, cond: int, t: float, eps: np.ndarray) -> float:
        if self.cfg.objective == "diffusion":
            return self.diffusion_loss(theta, clip, cond, t, eps)
        return self.flow_matching_loss(theta, clip, cond, t, eps)

    # --------------------------------------------------------------- training

    def train(
        self,
        theta: np.ndarray,
        clips: list[VideoClip],
        config: TrainConfig,
        masks: dict[int, MotionWeights] | None = None,
    ) -> np.ndarray:
        """Momentum SGD on the selected objective; deterministic given the seed.

        When `masks` is provided the motion-weighted objective is minimized
        instead of the plain one.
        """
        if not clips:
            raise InvalidParam("empty training set")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=config.seed, spawn_key=(11,))))
        latents = [self.encode(c) for c in clips]
        conds = [c.category_label for c in clips]
        total_t = self.cfg.total_timesteps

        theta = theta.copy()
        vel = np.zeros_like(theta)
        shape = latents[0].shape
        for _ in range(config.steps):
            idx = rng.integers(0, len(clips), size=config.batch_size)
            grad = np.zeros_like(theta)
            loss_acc = 0.0
            for i in idx:
                t = float(rng.integers(1, total_t + 1))
                eps = rng.standard_normal(shape)
                w = None
                if masks is not None:
                    w = masks[clips[i].clip_id].latent_weights
                loss, g = self.loss_and_grad(theta, latents[i], conds[i], t, eps, weights=w)
                loss_acc += loss
                grad += g
            grad /= config.batch_size
            if not np.isfinite(loss_acc):
                raise DivergedLoss(f"non-finite loss at step with indices {idx}")
            vel = config.momentum * vel - config.lr * grad
            theta = theta + vel
        if not np.isfinite(theta).all():
            raise DivergedLoss("non-finite parameters after training")
        return theta

    def eval_loss(self, theta, clips: list[VideoClip], pairs: list[tuple[float, np.ndarray]]) -> float:
        """Mean unmasked loss over clips x fixed (t, eps) pairs."""
        total = 0.0
        for clip in clips:
            for t, eps in pairs:
                total += self.unmasked_loss(theta, clip, clip.category_label, t, eps)
        return total / (len(clips) * len(pairs))

    def eval_pairs(self, seed: int, count: int) -> list[tuple[float, np.ndarray]]:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(13,))))
        shape = (self.cfg.frames, self.cfg.latent_h, self.cfg.latent_w, self.cfg.latent_c)
        total_t = self.cfg.total_timesteps
        return [(float(rng.integers(1, total_t + 1)), rng.standard_normal(shape)) for _ in range(count)]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, model: GenModel, theta: np.ndarray):
    desc = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(desc)))
            fh.write(desc)
            fh.write(theta.astype("<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path: Path) -> tuple[GenModel, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CorruptRecord("bad checkpoint magic")
    (desc_len,) = struct.unpack("<I", raw[8:12])
    desc = json.loads(raw[12 : 12 + desc_len])
    model = GenModel(ModelConfig(**desc))
    theta = np.frombuffer(raw[12 + desc_len :], dtype="<f4").astype(np.float64)
    if theta.size != model.n_params:
        raise CorruptRecord(f"checkpoint has {theta.size} params, expected {model.n_params}")
    return model, theta


def checkpoint_hash(path: Path) -> bytes:
    return hashlib.sha256(Path(path).read_bytes()).digest()
