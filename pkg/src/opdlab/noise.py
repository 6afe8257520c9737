"""Synthetic multi-frame noisy datasets.

Every noise draw comes from a generator seeded by
``(master_seed, sample_index, frame_index)``, so a stack is reproducible on
its own, independent of generation order or worker count. Noisy values are
never clipped here; clipping happens only when writing 8-bit PNGs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian", "poisson", "speckle")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    sigma: float | None = None
    lam: float | None = None
    looks: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        params = {"gaussian": self.sigma, "poisson": self.lam, "speckle": self.looks}
        others = [k for k, v in params.items() if k != self.kind and v is not None]
        if others:
            raise ValueError(f"{self.kind} noise takes no parameter for {', '.join(others)}")
        value = params[self.kind]
        if value is None:
            raise ValueError(f"{self.kind} noise needs its parameter")
        if self.kind == "gaussian" and value < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "poisson" and value <= 0:
            raise ValueError("lambda must be > 0")
        if self.kind == "speckle" and value < 1:
            raise ValueError("looks must be >= 1")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseSpec":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def poisson(cls, lam: float) -> "NoiseSpec":
        return cls("poisson", lam=float(lam))

    @classmethod
    def speckle(cls, looks: float) -> "NoiseSpec":
        return cls("speckle", looks=float(looks))

    def to_dict(self) -> dict:
        key, value = {"gaussian": ("sigma", self.sigma),
                      "poisson": ("lambda", self.lam),
                      "speckle": ("looks", self.looks)}[self.kind]
        return {"kind": self.kind, key: value}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        kind = d["kind"]
        if kind == "gaussian":
            return cls.gaussian(d["sigma"])
        if kind == "poisson":
            return cls.poisson(d["lambda"])
        return cls.speckle(d["looks"])


@dataclass
class FrameStack:
    """``m`` aligned noisy frames of one scene.

    ``frames`` has shape ``(m, H, W)``; ``clean`` is ``(H, W)`` in [0, 1] or None.
    """
    frames: np.ndarray
    clean: np.ndarray | None = None
    sample_id: str = ""
    noise: NoiseSpec | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (m, H, W), got {self.frames.shape}")
        if self.m < 2:
            raise ValueError(f"a frame stack needs m >= 2 frames, got {self.m}")
        if self.clean is not None and self.clean.shape != self.frames.shape[1:]:
            raise ValueError("clean image does not match frame shape")

    @property
    def m(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def frame_rng(master_seed: int, sample_index: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, sample_index, frame_index]))


def add_gaussian(clean: np.ndarray, sigma255: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise with std ``sigma255 / 255``."""
    if sigma255 < 0:
        raise ValueError("sigma must be >= 0")
    clean = np.asarray(clean, dtype=np.float64)
    if sigma255 == 0:
        return clean.copy()
    return clean + rng.standard_normal(clean.shape) * (sigma255 / 255.0)


def add_poisson(clean: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Photon-count noise ``Poisson(lam * x) / lam``; mean x, variance x / lam."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    clean = np.asarray(clean, dtype=np.float64)
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("Poisson noise needs clean values in [0, 1]")
    return rng.poisson(lam * clean) / lam


def add_speckle(clean: np.ndarray, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative Gamma speckle with unit mean and variance ``1 / looks``."""
    if looks < 1:
        raise ValueError("looks must be >= 1")
    clean = np.asarray(clean, dtype=np.float64)
    return clean * rng.gamma(looks, 1.0 / looks, size=clean.shape)


def apply_noise(clean: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "gaussian":
        return add_gaussian(clean, spec.sigma, rng)
    if spec.kind == "poisson":
        return add_poisson(clean, spec.lam, rng)
    return add_speckle(clean, spec.looks, rng)


def make_stack(clean: np.ndarray, spec: NoiseSpec, m: int, master_seed: int, sample_index: int,
               sample_id: str | None = None) -> FrameStack:
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    clean = np.asarray(clean, dtype=np.float64)
    frames = np.stack([apply_noise(clean, spec, frame_rng(master_seed, sample_index, j)) for j in range(m)])
    return FrameStack(frames.astype(np.float32), clean.astype(np.float32),
                      sample_id or f"s{sample_index:04d}", spec, master_seed)


def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random texture with a few flat geometric shapes, in [0, 1]."""
    img = np.zeros((size, size))
    for scale in (size / 6, size / 16, size / 40):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale, mode="wrap")
        layer /= layer.std() + 1e-12
        img += layer * rng.uniform(0.3, 1.0)
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    img = 0.15 + 0.7 * img

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        level = rng.uniform(0.05, 0.95)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 12, size / 4)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < rng.uniform(0.3, 1.0) * r)
        img[mask] = level
    # 8-bit quantised so clean.png is lossless
    return np.round(np.clip(img, 0, 1) * 255) / 255


def procedural_images(count: int, size: int, seed: int) -> Iterator[tuple[str, np.ndarray]]:
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1EA, i]))
        yield f"s{i:04d}", procedural_image(size, rng)


def _read_luminance(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def directory_images(source: str | os.PathLike, size: int, seed: int) -> Iterator[tuple[str, np.ndarray]]:
    """Grayscale crops of every readable image in ``source`` (sorted by name)."""
    paths = sorted(p for p in Path(source).iterdir() if p.is_file())
    for i, path in enumerate(paths):
        try:
            img = _read_luminance(path)
        except Exception as exc:  # unreadable or not an image
            logger.warning("skipping %s: %s", path, exc)
            continue
        h, w = img.shape
        if h < size or w < size:
            logger.warning("skipping %s: %dx%d is smaller than the %d crop", path, h, w, size)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC809, i]))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        yield path.stem, img[top:top + size, left:left + size]


# --- on-disk layout -------------------------------------------------------

FRAME_MAGIC = b"OPDF"
FRAME_VERSION = 1


def write_frames_bin(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    m, h, w = frames.shape
    header = FRAME_MAGIC + np.array([FRAME_VERSION, m, h, w], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames_bin(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FRAME_MAGIC:
        raise ValueError(f"{path}: not a frame binary (bad magic)")
    version, m, h, w = np.frombuffer(raw[4:20], dtype="<u4")
    if version != FRAME_VERSION:
        raise ValueError(f"{path}: unsupported frame binary version {version}")
    expected = int(m) * int(h) * int(w) * 4
    if len(raw) - 20 != expected:
        raise ValueError(f"{path}: payload is {len(raw) - 20} bytes, expected {expected}")
    return np.frombuffer(raw[20:], dtype="<f4").reshape(int(m), int(h), int(w)).astype(np.float32)


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_stack(root: Path, stack: FrameStack) -> str:
    """Write one sample directory; returns the sha256 of its frame binary."""
    d = root / stack.sample_id
    d.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(stack.frames):
        write_png(d / f"frame_{j:02d}.png", frame)
    if stack.clean is not None:
        write_png(d / "clean.png", stack.clean)
    write_frames_bin(d / "frames_f32.bin", stack.frames)
    return hashlib.sha256((d / "frames_f32.bin").read_bytes()).hexdigest()


def synth_dataset(out: str | os.PathLike, spec: NoiseSpec, m: int = 8, seed: int = 0,
                  count: int = 32, size: int = 64, clean_source: str | os.PathLike | None = None) -> dict:
    """Generate a dataset on disk and return its manifest.

    With ``clean_source`` unset, ``count`` procedural images are used;
    otherwise up to ``count`` crops of the images in that directory.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    if clean_source is None:
        source = procedural_images(count, size, seed)
    else:
        source = directory_images(clean_source, size, seed)

    samples = []
    for index, (sample_id, clean) in enumerate(source):
        if index >= count:
            break
        stack = make_stack(clean, spec, m, seed, index, sample_id)
        digest = write_stack(root, stack)
        samples.append({"id": sample_id, "h": size, "w": size, "has_clean": True, "sha256": digest})
    if not samples:
        raise RuntimeError("no samples were written")

    manifest = {"version": MANIFEST_VERSION, "noise": spec.to_dict(), "m": m, "seed": seed, "samples": samples}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(root: str | os.PathLike) -> list[FrameStack]:
    """Read the float binaries (and clean PNGs) listed in ``manifest.json``."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = NoiseSpec.from_dict(manifest["noise"])
    stacks = []
    for entry in manifest["samples"]:
        d = root / entry["id"]
        frames = read_frames_bin(d / "frames_f32.bin")
        clean = None
        if entry.get("has_clean") and (d / "clean.png").exists():
            clean = _read_luminance(d / "clean.png").astype(np.float32)
        stacks.append(FrameStack(frames, clean, entry["id"], spec, manifest.get("seed")))
    return stacks


def manifest_checksum(root: str | os.PathLike) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def stack_from_arrays(frames: Sequence[np.ndarray], clean: np.ndarray | None = None, sample_id: str = "") -> FrameStack:
    return FrameStack(np.stack([np.asarray(f, dtype=np.float32) for f in frames]),
                      None if clean is None else np.asarray(clean, dtype=np.float32), sample_id)
