"""Synthetic motion video corpora with controlled, fully reproducible kinematics.

Clips are grayscale renders of a single rigid shape (square or disc) following
one of seven motion primitives. Every stochastic choice is derived from a
64-bit seed, so a corpus is a pure function of its config and ground-truth
trajectories are available in closed form for the oracle tests.

Kinematics conventions (all positions in pixels, origin at the top-left pixel
center, x = column, y = row):

* static     : fixed center.
* slide      : c(t) = c0 + v * t.
* free_fall  : semi-implicit Euler, v_y(k) = v_y0 + g*k applied before the
               position step, so  y(t) = y0 + v_y0*t + g*t*(t+1)/2.
* bounce     : same integrator, with elastic reflection of the center at the
               canvas margins (unit restitution).
* spin       : fixed center, orientation theta(t) = theta0 + omega * t.
* float_osc  : x(t) = x0 + v_x*t, y(t) = y0 + A*sin(omega*t) with A = v_y.
* roll       : slide along x with coupled rotation theta(t) = -(x(t)-x0)/r.

The rendered body carries an intensity ramp along its local x axis so that
rotation is visible in pixel space.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import CorruptRecord, EmptyCorpus, InvalidSpec, IoFailure, UnknownClip

CATEGORIES = ("static", "slide", "bounce", "spin", "free_fall", "float_osc", "roll")
SHAPES = ("square", "disc")

CONTAINER_MAGIC = b"MVCLIP01"
MANIFEST_VERSION = 1

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One output of the splitmix64 mixer; used to derive per-clip seeds."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def clip_seed(master_seed: int, index: int) -> int:
    return splitmix64((master_seed + (index + 1) * _GOLDEN) & _MASK64)


@dataclass(frozen=True)
class MotionSpec:
    """Parameters of one rendered clip; `seed` drives start position and phase."""

    category: str
    shape: str
    size_px: int
    velocity: tuple[float, float] = (0.0, 0.0)
    gravity: float = 0.0
    angular_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidSpec(f"unknown category {self.category!r}")
        if self.shape not in SHAPES:
            raise InvalidSpec(f"unknown shape {self.shape!r}")
        if self.size_px < 2:
            raise InvalidSpec(f"size_px must be >= 2, got {self.size_px}")
        object.__setattr__(self, "velocity", (float(self.velocity[0]), float(self.velocity[1])))
        if self.category == "static":
            # a static spec carries no kinematics, whatever the caller passed
            object.__setattr__(self, "velocity", (0.0, 0.0))
            object.__setattr__(self, "gravity", 0.0)
            object.__setattr__(self, "angular_rate", 0.0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(d["velocity"])
        return d

    @staticmethod
    def from_json(d: dict) -> "MotionSpec":
        return MotionSpec(
            category=d["category"],
            shape=d["shape"],
            size_px=int(d["size_px"]),
            velocity=tuple(d["velocity"]),
            gravity=float(d["gravity"]),
            angular_rate=float(d["angular_rate"]),
            seed=int(d["seed"]),
        )


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W, C) float32 in [0, 1]
    category_label: int
    clip_id: int

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def validate(self):
        if self.frames.ndim != 4:
            raise InvalidSpec("frames must be (F, H, W, C)")
        if self.frame_count < 2:
            raise InvalidSpec("clips need at least 2 frames")
        if not np.isfinite(self.frames).all():
            raise InvalidSpec("non-finite frame intensities")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise InvalidSpec("intensities must lie in [0, 1]")


def _trajectory(spec: MotionSpec, n_frames: int, dims: tuple[int, int, int], rng: np.random.Generator):
    """Center positions (F, 2) as (x, y) plus orientation angles (F,)."""
    h_px, w_px, _ = dims
    half = spec.size_px / 2.0
    # rotating squares sweep a disc of radius size*sqrt(2)/2
    margin = half * np.sqrt(2.0) + 1.0 if spec.shape == "square" else half + 1.0

    vx, vy = spec.velocity
    t = np.arange(n_frames, dtype=np.float64)

    if spec.category in ("static", "spin"):
        dx = np.zeros(n_frames)
        dy = np.zeros(n_frames)
    elif spec.category in ("slide", "roll"):
        dx = vx * t
        dy = vy * t
    elif spec.category == "free_fall":
        dx = vx * t
        dy = vy * t + spec.gravity * t * (t + 1) / 2.0
    elif spec.category == "float_osc":
        dx = vx * t
        dy = vy * np.sin(spec.angular_rate * t)
    elif spec.category == "bounce":
        dx = np.zeros(n_frames)  # placeholder; bounce integrates below
        dy = np.zeros(n_frames)
    else:  # pragma: no cover
        raise InvalidSpec(spec.category)

    if spec.category == "bounce":
        lo_x, hi_x = margin, w_px - 1 - margin
        lo_y, hi_y = margin, h_px - 1 - margin
        if lo_x >= hi_x or lo_y >= hi_y:
            raise InvalidSpec("shape exceeds canvas")
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        cvx, cvy = vx, vy
        xs, ys = [x], [y]
        for _ in range(n_frames - 1):
            cvy += spec.gravity
            x += cvx
            y += cvy
            # elastic reflection at the margins, repeated until inside
            for _ in range(8):
                if x < lo_x:
                    x, cvx = 2 * lo_x - x, -cvx
                elif x > hi_x:
                    x, cvx = 2 * hi_x - x, -cvx
                elif y < lo_y:
                    y, cvy = 2 * lo_y - y, -cvy
                elif y > hi_y:
                    y, cvy = 2 * hi_y - y, -cvy
                else:
                    break
            xs.append(x)
            ys.append(y)
        centers = np.stack([np.asarray(xs), np.asarray(ys)], axis=1)
    else:
        lo_x = margin - min(dx.min(), 0.0)
        hi_x = (w_px - 1 - margin) - max(dx.max(), 0.0)
        lo_y = margin - min(dy.min(), 0.0)
        hi_y = (h_px - 1 - margin) - max(dy.max(), 0.0)
        if lo_x > hi_x or lo_y > hi_y:
            raise InvalidSpec("trajectory does not fit the canvas")
        x0 = rng.uniform(lo_x, hi_x)
        y0 = rng.uniform(lo_y, hi_y)
        centers = np.stack([x0 + dx, y0 + dy], axis=1)

    if spec.category == "spin":
        theta0 = rng.uniform(0.0, 2 * np.pi)
        angles = theta0 + spec.angular_rate * t
    elif spec.category == "roll":
        radius = max(half, 1.0)
        angles = -(centers[:, 0] - centers[0, 0]) / radius
    else:
        angles = np.zeros(n_frames)
    return centers, angles


_SUBGRID = (np.arange(4) + 0.5) / 4.0 - 0.5  # 4x4 supersampling offsets


def _render_frame(spec: MotionSpec, center, angle: float, dims) -> np.ndarray:
    h_px, w_px, n_ch = dims
    ys, xs = np.meshgrid(np.arange(h_px, dtype=np.float64), np.arange(w_px, dtype=np.float64), indexing="ij")
    half = spec.size_px / 2.0
    cos_t, sin_t = np.cos(angle), np.sin(angle)

    cover = np.zeros((h_px, w_px))
    for oy in _SUBGRID:
        for ox in _SUBGRID:
            dx = xs + ox - center[0]
            dy = ys + oy - center[1]
            lx = cos_t * dx + sin_t * dy
            ly = -sin_t * dx + cos_t * dy
            if spec.shape == "square":
                inside = (np.abs(lx) <= half) & (np.abs(ly) <= half)
            else:
                inside = lx * lx + ly * ly <= half * half
            cover += inside
    cover /= len(_SUBGRID) ** 2

    # body texture: intensity ramp along the local x axis (rotation visible)
    dx = xs - center[0]
    dy = ys - center[1]
    lx = cos_t * dx + sin_t * dy
    ramp = np.clip(lx / spec.size_px + 0.5, 0.0, 1.0)
    frame = cover * (0.55 + 0.45 * ramp)
    return np.repeat(frame[:, :, None], n_ch, axis=2).astype(np.float32)


def generate_clip(spec: MotionSpec, n_frames: int, dims: tuple[int, int, int], clip_id: int = 0) -> VideoClip:
    """Render a clip deterministically from (spec, n_frames, dims)."""
    if n_frames < 2:
        raise InvalidSpec("need at least 2 frames")
    h_px, w_px, _ = dims
    if spec.size_px > min(h_px, w_px) // 2:
        raise InvalidSpec("shape exceeds canvas")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=spec.seed, spawn_key=(1,))))
    centers, angles = _trajectory(spec, n_frames, dims, rng)
    frames = np.stack([_render_frame(spec, centers[k], angles[k], dims) for k in range(n_frames)])
    clip = VideoClip(frames=frames, category_label=CATEGORIES.index(spec.category), clip_id=clip_id)
    clip.validate()
    return clip


def centroid(frame: np.ndarray) -> tuple[float, float]:
    """Intensity-weighted centroid (x, y) of one frame; oracle for kinematics."""
    img = frame[..., 0].astype(np.float64)
    total = img.sum()
    ys, xs = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]), indexing="ij")
    return float((img * xs).sum() / total), float((img * ys).sum() / total)


def standardize_frames(clip: VideoClip, canonical_f: int) -> VideoClip:
    """Uniform temporal subsampling/repetition onto `canonical_f` frames.

    Frame j of the output is source frame floor(j * F / canonical_f).
    """
    f = clip.frame_count
    if f == canonical_f:
        return clip
    idx = (np.arange(canonical_f) * f) // canonical_f
    return VideoClip(frames=clip.frames[idx].copy(), category_label=clip.category_label, clip_id=clip.clip_id)


# --------------------------------------------------------------------------
# corpus configuration and spec sampling


@dataclass
class CorpusConfig:
    counts: dict[str, int]
    master_seed: int
    height: int = 32
    width: int = 32
    channels: int = 1
    canonical_f: int = 8
    variable_lengths: tuple[int, ...] | None = None  # e.g. (4, 8, 16) for the length-bias study


def _sample_spec(category: str, seed: int, cfg: CorpusConfig, n_frames: int) -> MotionSpec:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    size = int(rng.integers(6, 13))
    # keep the whole trajectory inside the canvas for the given frame count
    margin = size / 2.0 * np.sqrt(2.0) + 1.0
    span = max(cfg.width - 1 - 2 * margin - 1.0, 1.0)
    vmax = max(span / max(n_frames - 1, 1), 0.15)

    velocity = (0.0, 0.0)
    gravity = 0.0
    angular_rate = 0.0
    if category == "slide":
        vx = rng.uniform(0.4, 1.0) * min(vmax, 1.6)
        velocity = (float(vx * rng.choice([-1.0, 1.0])), 0.0)
    elif category == "bounce":
        velocity = (float(rng.uniform(-1.2, 1.2)), float(rng.uniform(-0.5, 0.5)))
        gravity = float(rng.uniform(0.3, 0.7))
    elif category == "spin":
        angular_rate = float(rng.uniform(0.25, 0.6) * rng.choice([-1.0, 1.0]))
    elif category == "free_fall":
        g_max = 2.0 * span / max(n_frames * (n_frames - 1), 2)
        gravity = float(rng.uniform(0.4, 1.0) * min(g_max, 0.35))
    elif category == "float_osc":
        amp = rng.uniform(0.3, 0.8) * min(span / 2.0, 3.0)
        velocity = (float(rng.uniform(-0.3, 0.3) * min(vmax, 1.0)), float(amp))
        angular_rate = float(rng.uniform(0.5, 1.1))
    elif category == "roll":
        vx = rng.uniform(0.4, 1.0) * min(vmax, 1.4)
        velocity = (float(vx * rng.choice([-1.0, 1.0])), 0.0)
    return MotionSpec(
        category=category,
        shape=shape,
        size_px=size,
        velocity=velocity,
        gravity=gravity,
        angular_rate=angular_rate,
        seed=seed,
    )


# --------------------------------------------------------------------------
# container + manifest persistence


@dataclass
class ManifestEntry:
    clip_id: int
    offset: int
    n_frames: int
    spec: MotionSpec
    sha256: str

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "offset": self.offset,
            "F": self.n_frames,
            "spec": self.spec.to_json(),
            "sha256": self.sha256,
        }

    @staticmethod
    def from_json(d: dict) -> "ManifestEntry":
        return ManifestEntry(
            clip_id=int(d["clip_id"]),
            offset=int(d["offset"]),
            n_frames=int(d["F"]),
            spec=MotionSpec.from_json(d["spec"]),
            sha256=d["sha256"],
        )


@dataclass
class CorpusManifest:
    height: int
    width: int
    channels: int
    canonical_f: int
    container_path: Path
    entries: dict[int, ManifestEntry] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def clip_ids(self) -> list[int]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def load_clip(self, clip_id: int) -> VideoClip:
        if clip_id not in self.entries:
            raise UnknownClip(f"clip {clip_id} not in manifest")
        entry = self.entries[clip_id]
        n_bytes = entry.n_frames * self.height * self.width * self.channels * 4
        try:
            with open(self.container_path, "rb") as fh:
                fh.seek(entry.offset)
                raw = fh.read(n_bytes)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if len(raw) != n_bytes:
            raise CorruptRecord(f"clip {clip_id}: truncated record")
        if hashlib.sha256(raw).hexdigest() != entry.sha256:
            raise CorruptRecord(f"clip {clip_id}: checksum mismatch")
        frames = np.frombuffer(raw, dtype="<f4").reshape(
            entry.n_frames, self.height, self.width, self.channels
        )
        return VideoClip(
            frames=frames.copy(),
            category_label=CATEGORIES.index(entry.spec.category),
            clip_id=clip_id,
        )

    def load_all(self) -> list[VideoClip]:
        return [self.load_clip(i) for i in self.clip_ids()]

    def to_json(self) -> dict:
        return {
            "format_version": self.version,
            "H": self.height,
            "W": self.width,
            "C": self.channels,
            "canonical_F": self.canonical_f,
            "container": self.container_path.name,
            "entries": [self.entries[i].to_json() for i in self.clip_ids()],
        }

    def save(self, path: Path):
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @staticmethod
    def load(path: Path) -> "CorpusManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        manifest = CorpusManifest(
            height=int(d["H"]),
            width=int(d["W"]),
            channels=int(d["C"]),
            canonical_f=int(d["canonical_F"]),
            container_path=path.parent / d["container"],
            version=int(d["format_version"]),
        )
        for e in d["entries"]:
            entry = ManifestEntry.from_json(e)
            manifest.entries[entry.clip_id] = entry
        return manifest


def build_corpus(config: CorpusConfig, out_dir: Path, basename: str = "corpus") -> CorpusManifest:
    """Render all clips and write container + manifest under `out_dir`."""
    total = sum(config.counts.values())
    if total <= 0:
        raise EmptyCorpus("corpus config requests zero clips")
    for cat in config.counts:
        if cat not in CATEGORIES:
            raise InvalidSpec(f"unknown category {cat!r} in counts")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    container = out_dir / f"{basename}.bin"
    dims = (config.height, config.width, config.channels)

    manifest = CorpusManifest(
        height=config.height,
        width=config.width,
        channels=config.channels,
        canonical_f=config.canonical_f,
        container_path=container,
    )

    order = [cat for cat in CATEGORIES for _ in range(config.counts.get(cat, 0))]
    try:
        with open(container, "wb") as fh:
            fh.write(CONTAINER_MAGIC)
            fh.write(struct.pack("<IIII", config.height, config.width, config.channels, total))
            for clip_id, cat in enumerate(order):
                if config.variable_lengths:
                    n_frames = config.variable_lengths[clip_id % len(config.variable_lengths)]
                else:
                    n_frames = config.canonical_f
                seed = clip_seed(config.master_seed, clip_id)
                spec = _sample_spec(cat, seed, config, n_frames)
                clip = generate_clip(spec, n_frames, dims, clip_id=clip_id)
                raw = clip.frames.astype("<f4").tobytes()
                offset = fh.tell()
                fh.write(raw)
                manifest.entries[clip_id] = ManifestEntry(
                    clip_id=clip_id,
                    offset=offset,
                    n_frames=n_frames,
                    spec=spec,
                    sha256=hashlib.sha256(raw).hexdigest(),
                )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    manifest.save(out_dir / f"{basename}.json")
    return manifest
