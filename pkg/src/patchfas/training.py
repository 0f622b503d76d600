"""Two-view training loop for the encoder and classifier head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint
from .config import parse_bool
from .encoder import Encoder, EncoderSpec, ForwardCache
from .errors import ValidationError
from .losses import ClassifierHead, LossWeights, MarginConfig, asym_recognition_loss, similarity_loss
from .numerics import SgdState, sgd_step
from .patchgeom import AugmentationConfig, as_image, augment_view
from .taxonomy import LIVE, SPOOF, ClassRegistry, Manifest, PatchTypeLabel, from_manifest

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.002
    halve_every: int = 12
    momentum: float = 0.9
    margins: MarginConfig = MarginConfig()
    weights: LossWeights = LossWeights()
    seed: int = 0
    patch_size: int = 160
    flip_probability: float = 0.5
    rotation_range: float = 10.0
    stages: tuple[int, ...] = (16, 32, 64, 128)
    dim: int = 128
    precision: str = "f32"
    class_mode: str = "fine"     # "fine" patch types or "binary" live/spoof
    input_mode: str = "patch"    # "patch" crops or "resize" whole image

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.class_mode not in ("fine", "binary"):
            raise ValidationError("class_mode must be 'fine' or 'binary'")
        if self.input_mode not in ("patch", "resize"):
            raise ValidationError("input_mode must be 'patch' or 'resize'")
        SgdState(self.learning_rate, self.halve_every, self.momentum)
        self.augmentation()

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.patch_size, self.flip_probability, self.rotation_range)

    def encoder_spec(self, channels: int) -> EncoderSpec:
        return EncoderSpec(self.stages, self.dim, self.patch_size, channels)

    # dotted key-value form shared with the CLI config file
    _KEYS = {
        "train.epochs": ("epochs", int),
        "train.batch_size": ("batch_size", int),
        "train.seed": ("seed", int),
        "train.precision": ("precision", str),
        "train.class_mode": ("class_mode", str),
        "train.input_mode": ("input_mode", str),
        "sgd.learning_rate": ("learning_rate", float),
        "sgd.halve_every": ("halve_every", int),
        "sgd.momentum": ("momentum", float),
        "margin.scale": ("margins.scale", float),
        "margin.live": ("margins.live_margin", float),
        "margin.spoof": ("margins.spoof_margin", float),
        "loss.recognition": ("weights.recognition", float),
        "loss.similarity": ("weights.similarity", float),
        "patch.size": ("patch_size", int),
        "augment.flip_probability": ("flip_probability", float),
        "augment.rotation_range": ("rotation_range", float),
        "encoder.stages": ("stages", lambda s: tuple(int(v) for v in str(s).split(","))),
        "encoder.dim": ("dim", int),
    }

    def to_kv(self) -> dict[str, str]:
        out = {}
        for key, (attr, _) in self._KEYS.items():
            obj = self
            for part in attr.split("."):
                obj = getattr(obj, part)
            out[key] = ",".join(str(v) for v in obj) if isinstance(obj, tuple) else repr(obj) \
                if isinstance(obj, float) else str(obj)
        return out

    @classmethod
    def from_kv(cls, kv: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        top, margins, weights = {}, {}, {}
        for key, value in kv.items():
            if key not in cls._KEYS:
                raise ValidationError(f"unknown training key {key!r}")
            attr, conv = cls._KEYS[key]
            try:
                parsed = conv(value)
            except (TypeError, ValueError):
                raise ValidationError(f"bad value for {key}: {value!r}") from None
            if attr.startswith("margins."):
                margins[attr.split(".")[1]] = parsed
            elif attr.startswith("weights."):
                weights[attr.split(".")[1]] = parsed
            else:
                top[attr] = parsed
        return replace(base, margins=replace(base.margins, **margins),
                       weights=replace(base.weights, **weights), **top)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_loss: list[float] = field(default_factory=list)
    epoch_recognition: list[float] = field(default_factory=list)
    epoch_similarity: list[float] = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")

    def log_text(self) -> str:
        lines = ["# epoch,total,recognition,similarity"]
        for i, (t, r, s) in enumerate(zip(self.epoch_loss, self.epoch_recognition, self.epoch_similarity)):
            lines.append(f"{i},{t:.9g},{r:.9g},{s:.9g}")
        lines.append(f"# probe_initial={self.probe_initial:.9g} probe_final={self.probe_final:.9g}")
        return "\n".join(lines) + "\n"


def binary_registry(dataset_id: str = "ALL") -> ClassRegistry:
    return ClassRegistry([PatchTypeLabel(dataset_id, "ALL", LIVE, ""),
                          PatchTypeLabel(dataset_id, "ALL", SPOOF, "ANY")])


def training_labels(manifest: Manifest, class_mode: str):
    if class_mode == "binary":
        registry = binary_registry()
        y = [0 if e.label.is_live else 1 for e in manifest]
    else:
        registry = from_manifest(manifest)
        y = [registry.index_of(e.label) for e in manifest]
    registry.validate()
    return registry, np.array(y, dtype=np.int64)


def resize_whole(image, size: int) -> np.ndarray:
    """Box-filter resize of the full image to ``size x size`` (the distorting baseline)."""
    image = as_image(image)
    chans = [np.asarray(Image.fromarray(image[:, :, c].astype(np.float32), mode="F")
                        .resize((size, size), Image.BOX)) for c in range(image.shape[2])]
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0).astype(image.dtype)


def draw_view(image, cfg: TrainConfig, rng) -> np.ndarray:
    if cfg.input_mode == "resize":
        resized = resize_whole(image, cfg.patch_size)
        return resized[:, ::-1] if rng.random() < cfg.flip_probability else resized
    return augment_view(image, cfg.augmentation(), rng).pixels


def _batch_views(images, idx, cfg, rng, dtype):
    v1 = [draw_view(images[i], cfg, rng) for i in idx]
    v2 = [draw_view(images[i], cfg, rng) for i in idx]
    return np.stack(v1 + v2).astype(dtype, copy=False)


def loss_and_grads(encoder: Encoder, head: ClassifierHead, views, y, cfg: TrainConfig, live):
    """Forward/backward for one batch of view pairs stacked as [view1; view2]."""
    n = len(y)
    cache = ForwardCache()
    emb = encoder.forward(views, cache, training=True)
    w = head.forward()
    f1, f2 = emb[:n], emb[n:]
    rec, g1, g2, gw = asym_recognition_loss(f1, f2, y, w, cfg.margins, live)
    sim, s1, s2 = similarity_loss(f1, f2)
    a1, a2 = cfg.weights.recognition, cfg.weights.similarity
    total = a1 * rec + a2 * sim
    grad_emb = np.concatenate([a1 * g1 + a2 * s1, a1 * g2 + a2 * s2]).astype(emb.dtype, copy=False)
    grads = encoder.backward(cache, grad_emb)
    grads["head.w"] = head.backward(a1 * gw).astype(emb.dtype, copy=False)
    return float(total), float(rec), float(sim), grads


def batch_loss(encoder, head, views, y, cfg, live) -> float:
    n = len(y)
    emb = encoder.forward(views, training=True, update_stats=False)
    w = head.weights
    rec = asym_recognition_loss(emb[:n], emb[n:], y, w, cfg.margins, live)[0]
    sim = similarity_loss(emb[:n], emb[n:])[0]
    return float(cfg.weights.recognition * rec + cfg.weights.similarity * sim)


def train(manifest: Manifest, cfg: TrainConfig, images=None, progress=None) -> TrainResult:
    """Train on every entry of ``manifest`` (callers select the split)."""
    if len(manifest) == 0:
        raise ValidationError("training manifest is empty")
    registry, y_all = training_labels(manifest, cfg.class_mode)
    dtype = cfg.dtype
    if images is None:
        from .synthdata import load_images
        images = load_images(manifest, dtype)
    images = [np.asarray(img, dtype=dtype) for img in images]
    channels = images[0].shape[2]
    spec = cfg.encoder_spec(channels)

    root = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng, probe_seq = (np.random.default_rng(s) for s in root.spawn(3))
    encoder = Encoder.create(spec, init_rng, dtype)
    head = ClassifierHead.init(spec.dim, registry.n_classes, init_rng, dtype)
    live = registry.live_mask()
    params = dict(encoder.params)
    params["head.w"] = head.raw
    state = SgdState(cfg.learning_rate, cfg.halve_every, cfg.momentum)

    n = len(images)
    probe_idx = probe_seq.permutation(n)[:min(n, cfg.batch_size)]
    probe_views = _batch_views(images, probe_idx, cfg, probe_seq, dtype)
    probe_y = y_all[probe_idx]
    result = TrainResult(checkpoint=None)
    result.probe_initial = batch_loss(encoder, head, probe_views, probe_y, cfg, live)

    for epoch in range(cfg.epochs):
        order = data_rng.permutation(n)
        totals, recs, sims, weights = [], [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            views = _batch_views(images, idx, cfg, data_rng, dtype)
            total, rec, sim, grads = loss_and_grads(encoder, head, views, y_all[idx], cfg, live)
            sgd_step(params, grads, state, epoch)
            totals.append(total)
            recs.append(rec)
            sims.append(sim)
            weights.append(len(idx))
        result.epoch_loss.append(float(np.average(totals, weights=weights)))
        result.epoch_recognition.append(float(np.average(recs, weights=weights)))
        result.epoch_similarity.append(float(np.average(sims, weights=weights)))
        log.debug("epoch %d loss %.4f", epoch, result.epoch_loss[-1])
        if progress is not None:
            progress(epoch, result.epoch_loss[-1])

    result.probe_final = batch_loss(encoder, head, probe_views, probe_y, cfg, live)
    result.checkpoint = Checkpoint(spec, encoder.tensors(), head.raw, registry, cfg)
    return result
