import numpy as np
import pytest

from patchfas.checkpoint import to_bytes
from patchfas.encoder import Encoder, EncoderSpec, ForwardCache
from patchfas.errors import CheckpointShapeError, ShapeError, ValidationError
from patchfas.experiments import CorpusData
from patchfas.losses import ClassifierHead, asym_recognition_loss
from patchfas.numerics import SgdState, gradient_check, log_softmax, sgd_step
from patchfas.synthdata import CorpusSpec
from patchfas.training import (TrainConfig, _batch_views, batch_loss, loss_and_grads, train,
                               training_labels)

SMALL = EncoderSpec((4, 8), dim=6, patch_size=16)


def small_encoder(seed=0, dtype=np.float64):
    return Encoder.create(SMALL, np.random.default_rng(seed), dtype)


def sawtooth():
    return (np.arange(256).reshape(16, 16, 1) % 17) / 16.0


def test_embeddings_unit_and_deterministic(rng):
    enc = small_encoder()
    x = rng.uniform(size=(5, 16, 16, 1))
    e = enc.embed(x)
    assert e.shape == (5, 6)
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1) <= 1e-6)
    assert np.array_equal(enc.embed(np.stack([x[0], x[0]]))[1], e[0])


def test_inference_independent_of_batch(rng):
    enc = small_encoder()
    x = rng.uniform(size=(7, 16, 16, 1))
    whole = enc.embed(x)
    for i in range(7):
        assert np.allclose(enc.embed(x[i:i + 1])[0], whole[i], atol=1e-14)


def test_golden_embedding():
    e = small_encoder().embed(sawtooth()[None])[0]
    golden = [0.4705414727024399, -0.21647189253540935, -0.13181145149746928,
              -0.11662345449719837, -0.7189507075585404, -0.42879509491772577]
    assert np.allclose(e, golden, atol=1e-12, rtol=0)


def test_shape_rejected():
    with pytest.raises(ShapeError):
        small_encoder().embed(np.zeros((1, 15, 16, 1)))
    with pytest.raises(ShapeError):
        EncoderSpec(())


def test_mismatched_tensors_named():
    enc = small_encoder()
    tensors = enc.tensors()
    tensors["bn1.gamma"] = np.ones(5)
    with pytest.raises(CheckpointShapeError, match="bn1.gamma"):
        Encoder(SMALL, tensors)


def test_default_spec_size():
    n = Encoder.create(EncoderSpec(), np.random.default_rng(0)).n_params()
    assert 80_000 < n < 130_000


def test_training_backward_fd(rng):
    enc = small_encoder(3)
    x = rng.uniform(size=(4, 16, 16, 1))
    g_out = rng.standard_normal((4, 6))
    cache = ForwardCache()
    enc.forward(x, cache, training=True, update_stats=False)
    grads = enc.backward(cache, g_out)
    for name in ("conv0.w", "bn0.gamma", "bn1.beta", "fc.w", "fc.b"):
        p = enc.params[name]

        def f(v, name=name, p=p):
            saved = p.copy()
            p[...] = v
            out = float(np.sum(enc.forward(x, training=True, update_stats=False) * g_out))
            p[...] = saved
            return out

        r = gradient_check(f, p.copy(), grads[name], h=1e-6)
        assert r.max_rel_error < 1e-5, (name, r.max_rel_error)


def test_running_stats_update(rng):
    enc = small_encoder()
    before = enc.buffers["bn0.mean"].copy()
    enc.forward(rng.uniform(size=(2, 16, 16, 1)), training=True, update_stats=False)
    assert np.array_equal(enc.buffers["bn0.mean"], before)
    enc.forward(rng.uniform(size=(2, 16, 16, 1)), training=True)
    assert not np.array_equal(enc.buffers["bn0.mean"], before)


# ---- training -------------------------------------------------------------

def tiny_config(**kw):
    base = dict(epochs=1, batch_size=8, patch_size=32, stages=(4, 8), dim=8, precision="f64",
                learning_rate=0.01)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    from patchfas.synthdata import DeviceProfile, MaterialProfile
    spec = CorpusSpec([DeviceProfile("d1", 0.5, 0.01, 0.1, 1.0)],
                      [MaterialProfile("live", "LiveSkinLike"), MaterialProfile("print", "PrintHalftone")],
                      images_per_pair=16, image_size=64, seed=5)
    return CorpusData.render(spec, np.float64)


@pytest.mark.parametrize("seed", range(5))
def test_one_epoch_reduces_loss(tiny_data, seed):
    assert len(tiny_data.images) == 32
    # default batch size and learning rate
    r = train(tiny_data.manifest, tiny_config(seed=seed, batch_size=64, learning_rate=0.002),
              tiny_data.images)
    assert len(r.epoch_loss) == 1
    assert r.probe_final < r.probe_initial


def test_bit_identical_f64(tiny_data):
    cfg = tiny_config(epochs=2, seed=3)
    a = train(tiny_data.manifest, cfg, tiny_data.images).checkpoint
    b = train(tiny_data.manifest, cfg, tiny_data.images).checkpoint
    assert to_bytes(a) == to_bytes(b)


def test_degenerate_registry_rejected(tiny_data):
    live_only = tiny_data.manifest.select()
    live_only.entries = [e for e in live_only.entries if e.label.is_live]
    with pytest.raises(ValidationError):
        train(live_only, tiny_config())


def _frozen_batch(tiny_data, cfg, seed):
    rng = np.random.default_rng(seed)
    registry, y_all = training_labels(tiny_data.manifest, cfg.class_mode)
    idx = rng.permutation(len(tiny_data.images))[:cfg.batch_size]
    views = _batch_views(tiny_data.images, idx, cfg, rng, np.float64)
    enc = Encoder.create(cfg.encoder_spec(1), rng, np.float64)
    head = ClassifierHead.init(cfg.dim, registry.n_classes, rng)
    return enc, head, views, y_all[idx], registry.live_mask()


def test_plain_softmax_degeneracy(tiny_data):
    cfg = tiny_config(margins=tiny_config().margins.__class__(30.0, 0.0, 0.0),
                      weights=tiny_config().weights.__class__(1.0, 0.0))
    enc, head, views, y, live = _frozen_batch(tiny_data, cfg, 0)
    total = loss_and_grads(enc, head, views, y, cfg, live)[0]
    emb = enc.forward(views, training=True, update_stats=False)
    logits = 30.0 * emb @ head.weights
    n = len(y)
    ce = -log_softmax(logits)[np.arange(2 * n), np.concatenate([y, y])]
    assert total == pytest.approx(ce[:n].mean() + ce[n:].mean(), rel=1e-12)


def test_small_step_decreases_batch_loss(tiny_data):
    cfg = tiny_config()
    failures = 0
    for trial in range(20):
        enc, head, views, y, live = _frozen_batch(tiny_data, cfg, 100 + trial)
        before = batch_loss(enc, head, views, y, cfg, live)
        _, _, _, grads = loss_and_grads(enc, head, views, y, cfg, live)
        params = dict(enc.params)
        params["head.w"] = head.raw
        sgd_step(params, grads, SgdState(1e-4, 12, 0.0), 0)
        failures += batch_loss(enc, head, views, y, cfg, live) >= before
    assert failures <= 1


def test_norms_after_training(tiny_data):
    r = train(tiny_data.manifest, tiny_config(precision="f32", epochs=2), tiny_data.images)
    ck = r.checkpoint
    assert np.all(np.abs(np.linalg.norm(ck.head_weights(), axis=0) - 1) <= 1e-5)
    e = ck.embed(np.stack(tiny_data.images)[:4, :32, :32].astype(np.float32))
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1) <= 1e-5)


def test_recognition_loss_nonnegative(rng):
    f = rng.standard_normal((3, 4))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    w = np.eye(4)[:, :3]
    assert asym_recognition_loss(f, f, [0, 1, 2], w, TrainConfig().margins, [True, False, False])[0] > 0
