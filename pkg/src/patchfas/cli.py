"""Command-line driver.

Commands: gen-data, train, eval, score, score-map, retrieve, fewshot,
gradcheck. Configuration precedence is built-in defaults < ``--config``
file < individual flags. Errors print one line to stderr and exit with
the code carried by the exception class (see :mod:`patchfas.errors`).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_kv
from .embedding_apps import ReferenceSet, build_references, fewshot_score, retrieve_patch_types
from .errors import MissingFileError, PatchFASError, ValidationError
from .gradcheck import run_suite
from .imageio import read_image
from .metrics import EvalReport, ScoredSample, eer_threshold, evaluate, per_device_eval, write_scores
from .scoring import (DEFAULT_ANCHORS, DEFAULT_MAP_STRIDE, class_mask, face_patches,
                      patch_live_probs, patch_score_map)
from .synthdata import CorpusSpec, generate_corpus, load_images, reference_spec
from .taxonomy import SPLITS, Manifest
from .training import TrainConfig, train

log = logging.getLogger("patchfas")

# flag name -> dotted config key
TRAIN_FLAGS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "precision": "train.precision",
    "class_mode": "train.class_mode",
    "input_mode": "train.input_mode",
    "lr": "sgd.learning_rate",
    "halve_every": "sgd.halve_every",
    "momentum": "sgd.momentum",
    "scale": "margin.scale",
    "live_margin": "margin.live",
    "spoof_margin": "margin.spoof",
    "alpha_rec": "loss.recognition",
    "alpha_sim": "loss.similarity",
    "patch_size": "patch.size",
    "flip_probability": "augment.flip_probability",
    "rotation_range": "augment.rotation_range",
    "stages": "encoder.stages",
    "dim": "encoder.dim",
}
TEST_KEYS = {"test.anchors": int, "test.stride": int}


def _existing(path, what="file") -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{what} not found: {path}")
    return path


def _read_config(path):
    if path is None:
        return {}, {}
    kv = parse_kv(_existing(path, "config file").read_text(encoding="utf-8"))
    train_kv, test_kv = {}, {}
    for key, value in kv.items():
        if key in TEST_KEYS:
            try:
                test_kv[key] = TEST_KEYS[key](value)
            except ValueError:
                raise ValidationError(f"bad value for {key}: {value!r}") from None
        elif key in TrainConfig._KEYS:
            train_kv[key] = value
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return train_kv, test_kv


def build_train_config(args) -> TrainConfig:
    """Defaults < config file < flags; the result is validated on construction."""
    kv, _ = _read_config(getattr(args, "config", None))
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            kv[key] = str(value)
    if getattr(args, "seed", None) is not None:
        kv["train.seed"] = str(args.seed)
    return TrainConfig.from_kv(kv)


def _test_setting(args, key, flag, default):
    value = getattr(args, flag, None)
    if value is not None:
        return value
    _, test_kv = _read_config(getattr(args, "config", None))
    return test_kv.get(key, default)


def _load_manifest(args):
    manifest = Manifest.load(_existing(args.manifest, "manifest"))
    devices = set(args.device) if args.device else None
    exclude = set(args.exclude_device) if args.exclude_device else None
    return manifest.select(args.split, devices, exclude)


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _face_embeddings(ckpt, manifest, anchors, threads):
    images = load_images(manifest, ckpt.encoder.dtype)
    return _pmap(lambda img: ckpt.embed(face_patches(img, ckpt, anchors)), images, threads)


def _classifier_scores(ckpt, manifest, embeddings, keep):
    return [ScoredSample(e.path, e.label.device_id, e.label.is_live,
                         float(np.mean(patch_live_probs(emb, ckpt, keep))))
            for e, emb in zip(manifest, embeddings)]


def _write_reports(out_dir: Path, scores, threshold: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores(out_dir / "scores.csv", scores)
    pooled = evaluate(scores, threshold)
    (out_dir / "report.txt").write_text(pooled.to_text(), encoding="utf-8")
    rows = [EvalReport.HEADER, pooled.row("pooled")]
    for device, report in per_device_eval(scores, threshold).items():
        if report is not None:
            rows.append(report.row(device))
    (out_dir / "per_device.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return pooled, rows


# ---- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    spec = CorpusSpec.load(_existing(args.spec, "corpus spec")) if args.spec else reference_spec()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.images_per_pair is not None:
        overrides["images_per_pair"] = args.images_per_pair
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    if overrides:
        spec = CorpusSpec.from_text(spec.to_text())
        for k, v in overrides.items():
            setattr(spec, k, v)
        spec.__post_init__()
    manifest = generate_corpus(spec, args.out, args.threads)
    print(f"wrote {len(manifest)} images to {args.out}")


def cmd_train(args):
    cfg = build_train_config(args)
    manifest = _load_manifest(args)
    if len(manifest) == 0:
        raise ValidationError("no manifest entries match the selection")
    start = time.time()
    result = train(manifest, cfg, progress=lambda e, loss: log.info("epoch %d loss %.5f", e, loss))
    save_checkpoint(result.checkpoint, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    log_path.write_text(result.log_text(), encoding="utf-8")
    log.info("trained in %.1fs", time.time() - start)
    print(f"checkpoint {args.out}  final loss {result.epoch_loss[-1]:.6f}  log {log_path}")


def _threshold(args, ckpt, anchors, keep):
    if args.threshold is not None:
        return float(args.threshold)
    if args.threshold_split is None:
        return 0.5
    dev_args = argparse.Namespace(**{**vars(args), "split": args.threshold_split})
    dev = _load_manifest(dev_args)
    emb = _face_embeddings(ckpt, dev, anchors, args.threads)
    return eer_threshold(_classifier_scores(ckpt, dev, emb, keep))


def cmd_eval(args):
    # training overrides are validated but do not change test-time scoring
    build_train_config(args)
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    anchors = _test_setting(args, "test.anchors", "anchors", DEFAULT_ANCHORS)
    keep = class_mask(ckpt.registry, args.exclude_class) if args.exclude_class else None
    manifest = _load_manifest(args)
    threshold = _threshold(args, ckpt, anchors, keep)
    emb = _face_embeddings(ckpt, manifest, anchors, args.threads)
    scores = _classifier_scores(ckpt, manifest, emb, keep)
    _, rows = _write_reports(Path(args.out), scores, threshold)
    print("\n".join(rows))


def cmd_score(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    anchors = _test_setting(args, "test.anchors", "anchors", DEFAULT_ANCHORS)
    keep = class_mask(ckpt.registry, args.exclude_class) if args.exclude_class else None
    if args.image:
        lines = []
        for path in args.image:
            img = read_image(_existing(path, "image"), ckpt.encoder.dtype)
            emb = ckpt.embed(face_patches(img, ckpt, anchors))
            lines.append(f"{path},{float(np.mean(patch_live_probs(emb, ckpt, keep))):.9g}\n")
        text = "".join(lines)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return
    if not args.manifest:
        raise ValidationError("score needs --manifest or --image")
    manifest = _load_manifest(args)
    emb = _face_embeddings(ckpt, manifest, anchors, args.threads)
    scores = _classifier_scores(ckpt, manifest, emb, keep)
    if not args.out:
        raise ValidationError("score with --manifest needs --out")
    write_scores(args.out, scores)
    print(f"wrote {len(scores)} scores to {args.out}")


def cmd_score_map(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    stride = _test_setting(args, "test.stride", "stride", DEFAULT_MAP_STRIDE)
    img = read_image(_existing(args.image, "image"), ckpt.encoder.dtype)
    smap = patch_score_map(img, ckpt, stride, tuple(args.exclude_class or ()))
    smap.save(args.out)
    print(f"score map {smap.values.shape[1]}x{smap.values.shape[0]} -> {args.out}")


def _query_patch(args, img, ckpt):
    from .patchgeom import crop_at_center
    size = ckpt.spec.patch_size
    if args.center:
        x, y = (int(v) for v in args.center.split(","))
    else:
        h, w = img.shape[:2]
        x, y = w // 2, h // 2
    return crop_at_center(img, (x, y), size).pixels


def cmd_retrieve(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    img = read_image(_existing(args.image, "image"), ckpt.encoder.dtype)
    query = ckpt.embed(_query_patch(args, img, ckpt)[None])[0]
    top_k = args.top_k if args.top_k is not None else ckpt.registry.n_classes
    results = retrieve_patch_types(query, ckpt.head_weights(), ckpt.registry, top_k)
    print("rank,index,class,liveness,similarity")
    for r in results:
        print(f"{r.rank},{r.index},{r.name},{'LIVE' if r.is_live else 'SPOOF'},{r.similarity:.6f}")


def cmd_fewshot(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    anchors = _test_setting(args, "test.anchors", "anchors", DEFAULT_ANCHORS)
    if args.references:
        refs = ReferenceSet.load(args.references)
    else:
        if args.reference_split is None:
            raise ValidationError("fewshot needs --references or --reference-split")
        ref_args = argparse.Namespace(**{**vars(args), "split": args.reference_split})
        pool = [e for e in _load_manifest(ref_args) if e.label.is_live]
        if len(pool) < args.shots:
            raise ValidationError(f"only {len(pool)} live reference faces, need {args.shots}")
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        pick = sorted(rng.choice(len(pool), size=args.shots, replace=False))
        chosen = Manifest([pool[i] for i in pick], Path(args.manifest).parent)
        refs = build_references(_face_embeddings(ckpt, chosen, anchors, args.threads))
    if args.save_references:
        refs.save(args.save_references)
    manifest = _load_manifest(args)
    emb = _face_embeddings(ckpt, manifest, anchors, args.threads)
    scores = [ScoredSample(e.path, e.label.device_id, e.label.is_live, fewshot_score(x, refs))
              for e, x in zip(manifest, emb)]
    threshold = args.threshold if args.threshold is not None else eer_threshold(scores)
    _, rows = _write_reports(Path(args.out), scores, threshold)
    print("\n".join(rows))


def cmd_gradcheck(args):
    start = time.time()
    results = run_suite(args.trials, args.seed if args.seed is not None else 7, tolerance=args.tolerance)
    lines = ["trial,n_classes,dim,scale,live_margin,spoof_margin,rec_error,sim_error"]
    for r in results:
        lines.append(f"{r.trial},{r.n_classes},{r.dim},{r.scale:g},{r.live_margin:.4f},{r.spoof_margin:.4f},"
                     f"{r.recognition_error:.3e},{r.similarity_error:.3e}")
    worst = max(r.max_error for r in results)
    passed = worst < args.tolerance
    lines.append(f"# max_rel_error={worst:.3e} tolerance={args.tolerance:g} "
                 f"{'PASS' if passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    log.info("gradcheck took %.1fs", time.time() - start)
    print(lines[-1].lstrip("# "))
    return 0 if passed else 1


# ---- parser -----------------------------------------------------------------

def _selection_flags(p, split_default):
    p.add_argument("--manifest", required=True, help="manifest.csv of a corpus")
    p.add_argument("--split", choices=SPLITS, default=split_default, help="manifest split to use")
    p.add_argument("--device", action="append", help="keep only this device (repeatable)")
    p.add_argument("--exclude-device", action="append", help="drop this device (repeatable)")


def _train_flags(p):
    p.add_argument("--config", help="key-value config file (dotted keys)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, help="view pairs per batch")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--class-mode", choices=("fine", "binary"))
    p.add_argument("--input-mode", choices=("patch", "resize"))
    p.add_argument("--lr", type=float, help="initial SGD learning rate")
    p.add_argument("--halve-every", type=int, help="halve the learning rate every H epochs")
    p.add_argument("--momentum", type=float)
    p.add_argument("--scale", type=float, help="cosine logit scale s")
    p.add_argument("--live-margin", type=float, help="margin on live targets")
    p.add_argument("--spoof-margin", type=float, help="margin on spoof targets")
    p.add_argument("--alpha-rec", type=float, help="weight of the recognition loss")
    p.add_argument("--alpha-sim", type=float, help="weight of the similarity loss")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--flip-probability", type=float)
    p.add_argument("--rotation-range", type=float, help="max rotation in degrees")
    p.add_argument("--stages", help="comma-separated encoder channel widths")
    p.add_argument("--dim", type=int, help="embedding dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchfas", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="corpus spec file (default: built-in reference corpus)")
    p.add_argument("--seed", type=int)
    p.add_argument("--images-per-pair", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train encoder and classifier head")
    _selection_flags(p, "TRAIN")
    _train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log path (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and write pooled and per-device reports")
    _selection_flags(p, "TEST")
    _train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--anchors", type=int, help="grid anchors per side (default 3)")
    p.add_argument("--threshold", type=float, help="fixed decision threshold")
    p.add_argument("--threshold-split", choices=SPLITS, help="pick the EER threshold on this split")
    p.add_argument("--exclude-class", type=int, action="append", help="mask a class index at test time")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="live probability per face")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="key-value config file (test.* keys)")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--device", action="append")
    p.add_argument("--exclude-device", action="append")
    p.add_argument("--image", action="append", help="score a single image (repeatable)")
    p.add_argument("--anchors", type=int)
    p.add_argument("--exclude-class", type=int, action="append")
    p.add_argument("--out", help="score file (stdout for --image when omitted)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("score-map", help="dense patch live-probability map of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="key-value config file (test.* keys)")
    p.add_argument("--image", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--exclude-class", type=int, action="append")
    p.add_argument("--out", required=True, help="output PGM (a .coords sidecar is written next to it)")
    p.set_defaults(func=cmd_score_map)

    p = sub.add_parser("retrieve", help="rank patch types against one query patch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--center", help="query patch center x,y (default: image center)")
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("fewshot", help="score faces against live reference embeddings")
    _selection_flags(p, "TEST")
    p.add_argument("--config", help="key-value config file (test.* keys)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--references", help="reference embedding file")
    p.add_argument("--reference-split", choices=SPLITS, help="draw references from live faces of this split")
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--save-references", help="write the reference set used")
    p.add_argument("--seed", type=int)
    p.add_argument("--anchors", type=int)
    p.add_argument("--threshold", type=float, help="fixed threshold (default: EER on the scored split)")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="per-trial report file")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ValidationError.exit_code
    try:
        code = args.func(args)
    except PatchFASError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MissingFileError.exit_code
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
