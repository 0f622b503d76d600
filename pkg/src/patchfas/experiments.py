"""Held-out-device protocol on a synthetic corpus.

Train on the TRAIN split of every device except one, then on the held-out
device: score its TEST split with the classifier head, and with few-shot
live references drawn from its DEV split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .embedding_apps import ReferenceSet, fewshot_score
from .imageio import quantize
from .metrics import ScoredSample, auc, eer_threshold, evaluate, per_device_eval
from .scoring import DEFAULT_ANCHORS, face_patches, patch_live_probs
from .synthdata import CorpusSpec, corpus_manifest, iter_images
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# device held out in the reference protocol
REFERENCE_HELDOUT = "dev2"

ABLATIONS = {
    "full": {},
    "binary": {"class_mode": "binary"},
    "no_margin": {"margins": (0.0, 0.0)},
    "no_sim": {"similarity": 0.0},
    "resize": {"input_mode": "resize"},
}


def ablation_config(base: TrainConfig, name: str, seed: int) -> TrainConfig:
    change = dict(ABLATIONS[name])
    cfg = replace(base, seed=seed)
    if "margins" in change:
        ml, ms = change.pop("margins")
        cfg = replace(cfg, margins=replace(cfg.margins, live_margin=ml, spoof_margin=ms))
    if "similarity" in change:
        cfg = replace(cfg, weights=replace(cfg.weights, similarity=change.pop("similarity")))
    return replace(cfg, **change)


def fast_config(**overrides) -> TrainConfig:
    """Desk-scale settings for 64 px patches on 128 px synthetic faces."""
    base = dict(patch_size=64, epochs=30, halve_every=12, batch_size=16, learning_rate=0.02)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class CorpusData:
    spec: CorpusSpec
    manifest: object
    images: list

    @classmethod
    def render(cls, spec: CorpusSpec, dtype=np.float32, threads: int = 1) -> "CorpusData":
        """Render in memory, quantized to 8 bits exactly as the on-disk corpus."""
        manifest = corpus_manifest(spec)
        images = [None] * len(manifest)
        for k, img in iter_images(spec, threads):
            images[k] = (quantize(img).astype(np.float64) / 255.0).astype(dtype)
        return cls(spec, manifest, images)

    def subset(self, split=None, devices=None, exclude_devices=None):
        keep = [i for i, e in enumerate(self.manifest.entries)
                if (split is None or e.split == split)
                and (devices is None or e.label.device_id in devices)
                and (exclude_devices is None or e.label.device_id not in exclude_devices)]
        sub = type(self.manifest)([self.manifest.entries[i] for i in keep], self.manifest.root)
        return sub, [self.images[i] for i in keep]


@dataclass
class HeldOutResult:
    name: str
    seed: int
    heldout: str
    auc: float
    hter: float
    threshold: float
    fewshot_auc: dict = field(default_factory=dict)   # shots -> mean AUC over reference draws
    train_loss: list = field(default_factory=list)
    scores: list = field(default_factory=list)


def _face_embeddings(ckpt, images, anchors):
    return [ckpt.embed(face_patches(img, ckpt, anchors)) for img in images]


def fewshot_aucs(test_emb, test_entries, ref_pool, shots, draws: int, seed: int) -> float:
    """Mean AUC over ``draws`` random reference sets of ``shots`` faces."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99, shots]))
    values = []
    for _ in range(draws):
        pick = rng.choice(len(ref_pool), size=shots, replace=False)
        refs = ReferenceSet(np.concatenate([ref_pool[i] for i in pick]).astype(np.float64))
        scores = [ScoredSample(e.path, e.label.device_id, e.label.is_live, fewshot_score(emb, refs))
                  for emb, e in zip(test_emb, test_entries)]
        values.append(auc(scores))
    return float(np.mean(values))


def run_heldout(data: CorpusData, heldout: str, cfg: TrainConfig, name: str = "full",
                shots=(5, 10), draws: int = 10, anchors: int = DEFAULT_ANCHORS) -> HeldOutResult:
    train_m, train_imgs = data.subset("TRAIN", exclude_devices={heldout})
    result = train(train_m, cfg, train_imgs)
    ckpt = result.checkpoint

    test_m, test_imgs = data.subset("TEST", devices={heldout})
    dev_m, dev_imgs = data.subset("DEV", devices={heldout})
    test_emb = _face_embeddings(ckpt, test_imgs, anchors)
    dev_emb = _face_embeddings(ckpt, dev_imgs, anchors)

    def scored(entries, embs):
        return [ScoredSample(e.path, e.label.device_id, e.label.is_live,
                             float(np.mean(patch_live_probs(emb, ckpt)))) for e, emb in zip(entries, embs)]

    test_scores = scored(test_m.entries, test_emb)
    threshold = eer_threshold(scored(dev_m.entries, dev_emb))
    report = evaluate(test_scores, threshold)

    ref_pool = [emb for e, emb in zip(dev_m.entries, dev_emb) if e.label.is_live]
    few = {}
    for k in shots:
        if k <= len(ref_pool):
            few[k] = fewshot_aucs(test_emb, test_m.entries, ref_pool, k, draws, cfg.seed)
    log.info("%s seed=%d auc=%.4f few=%s", name, cfg.seed, report.auc, few)
    return HeldOutResult(name, cfg.seed, heldout, report.auc, report.hter, threshold, few,
                         result.epoch_loss, test_scores)


def per_device_report(data: CorpusData, ckpt, split="TEST", anchors=DEFAULT_ANCHORS, threshold=0.5):
    m, imgs = data.subset(split)
    embs = _face_embeddings(ckpt, imgs, anchors)
    scores = [ScoredSample(e.path, e.label.device_id, e.label.is_live, float(np.mean(patch_live_probs(x, ckpt))))
              for e, x in zip(m.entries, embs)]
    return evaluate(scores, threshold), per_device_eval(scores, threshold)
