import os

import numpy as np
import pytest

from patchfas.errors import ValidationError
from patchfas.imageio import read_image
from patchfas.synthdata import (CorpusSpec, DeviceProfile, MaterialProfile, apply_device,
                                apply_material, corpus_manifest, generate_base_texture,
                                generate_corpus, iter_images, reference_spec)
from patchfas.taxonomy import Manifest, from_manifest

LIVE_M = MaterialProfile("live", "LiveSkinLike")
PRINT_M = MaterialProfile("print", "PrintHalftone", pitch=4.0, strength=0.3)
SCREEN_M = MaterialProfile("screen", "ScreenGrid", pitch=3.0, angle=6.0, strength=0.2)


def total_variation(img):
    return np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum()


def test_texture_deterministic_and_bounded():
    a = generate_base_texture(64, 7)
    assert np.array_equal(a, generate_base_texture(64, 7))
    assert a.shape == (64, 64, 1) and a.min() >= 0 and a.max() <= 1
    assert generate_base_texture(64, 7, channels=3).shape == (64, 64, 3)


def test_texture_seeds_differ():
    diffs = [np.abs(generate_base_texture(64, 2 * i) - generate_base_texture(64, 2 * i + 1)).mean()
             for i in range(100)]
    assert min(diffs) > 0.01


def test_texture_size_limit():
    generate_base_texture(64, 0)
    with pytest.raises(ValidationError):
        generate_base_texture(32, 0)


def test_live_material_identity():
    img = generate_base_texture(64, 1)
    assert np.array_equal(apply_material(img, LIVE_M), img)


def test_halftone_spectrum_peak():
    img = generate_base_texture(128, 3)
    out = apply_material(img, MaterialProfile("p", "PrintHalftone", pitch=4.0, strength=1.0))[:, :, 0]
    spec = np.abs(np.fft.fft2(out - out.mean()))
    freqs = np.fft.fftfreq(128)
    # strongest component away from the low-frequency face content
    high = np.add.outer(np.abs(freqs) ** 2, np.abs(freqs) ** 2) > 0.1 ** 2
    iy, ix = np.unravel_index(np.argmax(np.where(high, spec, 0)), spec.shape)
    radial = max(abs(freqs[iy]), abs(freqs[ix]))
    assert radial == pytest.approx(0.25, abs=0.02)


def test_screen_differs_from_print():
    img = generate_base_texture(64, 4)
    assert np.abs(apply_material(img, SCREEN_M) - apply_material(img, PRINT_M)).mean() > 0.005


def test_device_identity_and_order():
    img = generate_base_texture(64, 5)
    assert np.array_equal(apply_device(img, DeviceProfile("x", 0, 0, 0, 1.0), 0), img)
    blurred = apply_device(img, DeviceProfile("x", 2.0, 0, 0, 1.0), 0)
    noisy = apply_material(img, PRINT_M)
    assert total_variation(apply_device(noisy, DeviceProfile("x", 2.0, 0, 0, 1.0), 0)) < total_variation(noisy)
    assert total_variation(blurred) < total_variation(img)
    d = DeviceProfile("x", 0.0, 0.05, 0.0, 1.0)
    assert np.array_equal(apply_device(img, d, 9), apply_device(img, d, 9))
    assert not np.array_equal(apply_device(img, d, 9), apply_device(img, d, 10))


def test_profile_invariants():
    with pytest.raises(ValidationError):
        DeviceProfile("x", -1.0, 0, 0, 1.0)
    with pytest.raises(ValidationError):
        MaterialProfile("m", "PrintHalftone", pitch=0.0)
    with pytest.raises(ValidationError):
        CorpusSpec([DeviceProfile("x", 0, 0, 0, 1)], [LIVE_M])
    with pytest.raises(ValidationError):
        CorpusSpec([DeviceProfile("x", 0, 0, 0, 1)], [LIVE_M, PRINT_M], splits=(0.5, 0.5, 0.5))


def test_casia_shaped_corpus():
    spec = reference_spec(images_per_pair=20)
    m = corpus_manifest(spec)
    assert len(m) == 180
    reg = from_manifest(m)
    assert (reg.n_classes, reg.n_live) == (9, 3)


def test_minimal_corpus(tiny_spec):
    reg = from_manifest(corpus_manifest(tiny_spec))
    assert (reg.n_classes, reg.n_live) == (2, 1)


def test_split_counts(tiny_spec):
    m = corpus_manifest(tiny_spec)
    splits = [e.split for e in m]
    assert splits.count("TRAIN") == 8 and splits.count("DEV") == 4 and splits.count("TEST") == 4


def test_corpus_files_and_determinism(tmp_path, small_spec):
    a = generate_corpus(small_spec, tmp_path / "a")
    b = generate_corpus(small_spec, tmp_path / "b", threads=3)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for e in a:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()
    loaded = Manifest.load(tmp_path / "a" / "manifest.csv")
    assert loaded.entries == a.entries
    img = read_image(loaded.resolve(loaded.entries[0]))
    assert img.shape == (64, 64, 1) and img.min() >= 0 and img.max() <= 1
    assert CorpusSpec.load(tmp_path / "a" / "corpus.cfg").to_text() == small_spec.to_text()


def test_serial_equals_parallel_in_memory(small_spec):
    serial = dict(iter_images(small_spec, 1))
    parallel = dict(iter_images(small_spec, 4))
    assert serial.keys() == parallel.keys()
    assert all(np.array_equal(serial[k], parallel[k]) for k in serial)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_dir(tmp_path, tiny_spec):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(ValidationError):
        generate_corpus(tiny_spec, ro / "out")


def test_unwritable_path_is_file(tmp_path, tiny_spec):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ValidationError):
        generate_corpus(tiny_spec, blocker / "out")


def test_spec_text_roundtrip():
    spec = reference_spec()
    assert CorpusSpec.from_text(spec.to_text()).to_text() == spec.to_text()
    with pytest.raises(ValidationError):
        CorpusSpec.from_text(spec.to_text() + "bogus.key = 1\n")
