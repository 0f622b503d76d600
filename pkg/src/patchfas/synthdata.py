"""Synthetic capture simulator.

Every image is ``device(material(base_texture))``. Materials add the
physical cue of the presenting medium (halftone dots for prints, a
two-grating moire for screens); devices add the capture signature
(gamma, blur, sensor noise, 8x8 block artifacts). Live and spoof images
of one device share identical device processing, so anything separating
them is material-induced.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import dump_kv, parse_kv
from .errors import ValidationError
from .imageio import write_image
from .taxonomy import LIVE, SPOOF, Manifest, ManifestEntry, PatchTypeLabel

LIVE_SKIN = "LiveSkinLike"
PRINT_HALFTONE = "PrintHalftone"
SCREEN_GRID = "ScreenGrid"
KINDS = (LIVE_SKIN, PRINT_HALFTONE, SCREEN_GRID)
BLOCK = 8


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    block_strength: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.blur_sigma, self.noise_std, self.block_strength, self.gamma) < 0:
            raise ValidationError(f"device {self.id}: parameters must be non-negative")
        if self.block_strength > 1:
            raise ValidationError(f"device {self.id}: block_strength must be <= 1")


@dataclass(frozen=True)
class MaterialProfile:
    id: str
    kind: str = LIVE_SKIN
    pitch: float = 4.0        # halftone dot pitch or screen grating pitch, px
    angle: float = 0.0        # halftone screen angle or moire angle, degrees
    strength: float = 0.3     # blend of the overlay into the image

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"material {self.id}: unknown kind {self.kind!r}")
        if self.kind != LIVE_SKIN and self.pitch <= 0:
            raise ValidationError(f"material {self.id}: pitch must be positive")
        if not 0 <= self.strength <= 1:
            raise ValidationError(f"material {self.id}: strength must be in [0, 1]")

    @property
    def is_live(self):
        return self.kind == LIVE_SKIN


@dataclass
class CorpusSpec:
    devices: list[DeviceProfile]
    materials: list[MaterialProfile]
    images_per_pair: int = 20
    image_size: int = 128
    splits: tuple[float, float, float] = (0.5, 0.25, 0.25)
    seed: int = 0
    dataset_id: str = "SYN"
    channels: int = 1

    def __post_init__(self):
        if not self.devices:
            raise ValidationError("corpus needs at least one device")
        if not any(m.is_live for m in self.materials) or all(m.is_live for m in self.materials):
            raise ValidationError("corpus needs a live material and at least one spoof material")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be three non-negatives summing to 1, got {self.splits}")
        if self.image_size < 64:
            raise ValidationError("image_size must be >= 64")
        if self.images_per_pair < 1:
            raise ValidationError("images_per_pair must be >= 1")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        for group in (self.devices, self.materials):
            ids = [g.id for g in group]
            if len(set(ids)) != len(ids):
                raise ValidationError(f"duplicate ids in {ids}")

    def to_text(self) -> str:
        items = {
            "corpus.dataset": self.dataset_id,
            "corpus.seed": self.seed,
            "corpus.image_size": self.image_size,
            "corpus.images_per_pair": self.images_per_pair,
            "corpus.channels": self.channels,
            "corpus.split.train": float(self.splits[0]),
            "corpus.split.dev": float(self.splits[1]),
            "corpus.split.test": float(self.splits[2]),
        }
        for d in self.devices:
            for name in ("blur_sigma", "noise_std", "block_strength", "gamma"):
                items[f"device.{d.id}.{name}"] = float(getattr(d, name))
        for m in self.materials:
            items[f"material.{m.id}.kind"] = m.kind
            if not m.is_live:
                for name in ("pitch", "angle", "strength"):
                    items[f"material.{m.id}.{name}"] = float(getattr(m, name))
        return dump_kv(items)

    @classmethod
    def from_text(cls, text: str) -> "CorpusSpec":
        kv = parse_kv(text)
        devices: dict[str, dict] = {}
        materials: dict[str, dict] = {}
        corpus = {}
        for key, value in kv.items():
            parts = key.split(".")
            if parts[0] == "corpus":
                corpus[".".join(parts[1:])] = value
            elif parts[0] == "device" and len(parts) == 3:
                devices.setdefault(parts[1], {})[parts[2]] = float(value)
            elif parts[0] == "material" and len(parts) == 3:
                materials.setdefault(parts[1], {})[parts[2]] = value if parts[2] == "kind" else float(value)
            else:
                raise ValidationError(f"unknown corpus key {key!r}")
        try:
            return cls(
                devices=[DeviceProfile(i, **p) for i, p in devices.items()],
                materials=[MaterialProfile(i, **p) for i, p in materials.items()],
                images_per_pair=int(corpus.get("images_per_pair", 20)),
                image_size=int(corpus.get("image_size", 128)),
                splits=(float(corpus.get("split.train", 0.5)), float(corpus.get("split.dev", 0.25)),
                        float(corpus.get("split.test", 0.25))),
                seed=int(corpus.get("seed", 0)),
                dataset_id=corpus.get("dataset", "SYN"),
                channels=int(corpus.get("channels", 1)),
            )
        except TypeError as exc:
            raise ValidationError(f"bad corpus spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def generate_base_texture(size: int, seed, channels: int = 1) -> np.ndarray:
    """Smooth band-limited random field in [0, 1], shape (size, size, channels)."""
    if size < 64:
        raise ValidationError(f"texture size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.empty((size, size, channels))
    for c in range(channels):
        field_ = np.zeros((size, size))
        for _ in range(6):
            fx, fy = rng.uniform(-3.0, 3.0, size=2)
            field_ += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        field_ += 6.0 * ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 16, mode="wrap")
        # fine skin-like grain shared by every material
        field_ += 1.5 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5, mode="wrap")
        lo, hi = field_.min(), field_.max()
        out[:, :, c] = 0.2 + 0.6 * (field_ - lo) / (hi - lo)
    if channels == 3:
        tint = rng.uniform(0.85, 1.0, size=3)
        out = out * tint
    return np.clip(out, 0.0, 1.0)


def _coords(shape, angle_deg):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a = math.radians(angle_deg)
    return xx * math.cos(a) + yy * math.sin(a), -xx * math.sin(a) + yy * math.cos(a)


def apply_material(image, material: MaterialProfile) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if material.kind == LIVE_SKIN:
        return img.copy()
    h, w = img.shape[:2]
    p, a = material.pitch, material.strength
    if material.kind == PRINT_HALFTONE:
        u, v = _coords((h, w), material.angle)
        # amplitude-modulated dots: brighter tone -> smaller dark dot
        screen = 0.5 + 0.25 * (np.cos(2 * np.pi * u / p) + np.cos(2 * np.pi * v / p))
        dots = (img > screen[:, :, None]).astype(np.float64)
        out = (1 - a) * img + a * dots
    else:
        u, _ = _coords((h, w), 0.0)
        u2, _ = _coords((h, w), material.angle)
        gratings = 0.5 * (np.cos(2 * np.pi * u / p) + np.cos(2 * np.pi * u2 / (p * 1.08)))
        out = img * (1.0 + a * gratings[:, :, None])
    return np.clip(out, 0.0, 1.0)


def _block_means(img):
    h, w = img.shape[:2]
    out = np.empty_like(img)
    for y in range(0, h, BLOCK):
        for x in range(0, w, BLOCK):
            blk = img[y:y + BLOCK, x:x + BLOCK]
            out[y:y + BLOCK, x:x + BLOCK] = blk.mean(axis=(0, 1), keepdims=True)
    return out


def apply_device(image, device: DeviceProfile, seed) -> np.ndarray:
    """gamma -> Gaussian blur -> additive noise (clamped) -> 8x8 block artifacts."""
    img = np.asarray(image, dtype=np.float64)
    if device.gamma != 1.0:
        img = img ** device.gamma
    else:
        img = img.copy()
    if device.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(device.blur_sigma, device.blur_sigma, 0), mode="reflect")
    if device.noise_std > 0:
        rng = np.random.default_rng(seed)
        img = np.clip(img + rng.normal(0.0, device.noise_std, size=img.shape), 0.0, 1.0)
    if device.block_strength > 0:
        img = (1 - device.block_strength) * img + device.block_strength * _block_means(img)
    return np.clip(img, 0.0, 1.0)


def label_for(spec: CorpusSpec, device: DeviceProfile, material: MaterialProfile) -> PatchTypeLabel:
    if material.is_live:
        return PatchTypeLabel(spec.dataset_id, device.id, LIVE, "")
    return PatchTypeLabel(spec.dataset_id, device.id, SPOOF, material.id)


def render_image(spec: CorpusSpec, d: int, m: int, i: int) -> np.ndarray:
    base = generate_base_texture(spec.image_size, np.random.SeedSequence([spec.seed, 0, d, m, i]),
                                 spec.channels)
    img = apply_material(base, spec.materials[m])
    return apply_device(img, spec.devices[d], np.random.SeedSequence([spec.seed, 1, d, m, i]))


def split_assignment(spec: CorpusSpec, d: int, m: int) -> list[str]:
    n = spec.images_per_pair
    n_train = int(round(spec.splits[0] * n))
    n_dev = min(int(round(spec.splits[1] * n)), n - n_train)
    order = _rng(spec.seed, 2, d, m).permutation(n)
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "TRAIN" if rank < n_train else "DEV" if rank < n_train + n_dev else "TEST"
    return splits


def corpus_manifest(spec: CorpusSpec, root=None) -> Manifest:
    entries = []
    for d, dev in enumerate(spec.devices):
        for m, mat in enumerate(spec.materials):
            label = label_for(spec, dev, mat)
            for i, split in enumerate(split_assignment(spec, d, m)):
                entries.append(ManifestEntry(f"{dev.id}/{mat.id}/{i:04d}.pgm" if spec.channels == 1
                                             else f"{dev.id}/{mat.id}/{i:04d}.ppm", label, split))
    return Manifest(entries, Path(root) if root is not None else None)


def iter_images(spec: CorpusSpec, threads: int = 1):
    """Yield ``(entry_index, image)`` in manifest order."""
    jobs = [(d, m, i) for d in range(len(spec.devices)) for m in range(len(spec.materials))
            for i in range(spec.images_per_pair)]
    if threads <= 1:
        for k, job in enumerate(jobs):
            yield k, render_image(spec, *job)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from enumerate(pool.map(lambda job: render_image(spec, *job), jobs))


def generate_corpus(spec: CorpusSpec, out_dir, threads: int = 1) -> Manifest:
    """Render every image to ``out_dir`` and write ``manifest.csv`` and ``corpus.cfg``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {out_dir} is not writable: {exc}") from None
    manifest = corpus_manifest(spec, out_dir)
    for k, img in iter_images(spec, threads):
        write_image(out_dir / manifest.entries[k].path, img)
    manifest.save(out_dir / "manifest.csv")
    (out_dir / "corpus.cfg").write_text(spec.to_text(), encoding="utf-8")
    return manifest


def load_images(manifest: Manifest, dtype=np.float32) -> list[np.ndarray]:
    from .imageio import read_image
    return [read_image(manifest.resolve(e), dtype) for e in manifest]


def reference_spec_path() -> Path:
    return Path(__file__).with_name("data") / "reference_corpus.cfg"


def reference_spec(**overrides) -> CorpusSpec:
    spec = CorpusSpec.load(reference_spec_path())
    for k, v in overrides.items():
        setattr(spec, k, v)
    spec.__post_init__()
    return spec
