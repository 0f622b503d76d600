import numpy as np
import pytest

from patchfas.checkpoint import load_checkpoint
from patchfas.cli import main
from patchfas.metrics import read_scores

TRAIN = ["--patch-size", "32", "--stages", "4,8", "--dim", "8", "--epochs", "2", "--batch-size", "4",
         "--precision", "f64", "--lr", "0.01"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    from patchfas.synthdata import CorpusSpec, DeviceProfile, MaterialProfile
    root = tmp_path_factory.mktemp("cli")
    spec = CorpusSpec(
        devices=[DeviceProfile("a", 0.8, 0.02, 0.2, 1.1), DeviceProfile("b", 0.3, 0.01, 0.0, 1.0)],
        materials=[MaterialProfile("live", "LiveSkinLike"),
                   MaterialProfile("print", "PrintHalftone", pitch=4.0, strength=0.3)],
        images_per_pair=6, image_size=64, splits=(0.5, 0.25, 0.25), seed=11)
    (root / "spec.cfg").write_text(spec.to_text())
    assert main(["gen-data", "--spec", str(root / "spec.cfg"), "--out", str(root / "data")]) == 0
    ckpt = root / "m.ckpt"
    assert main(["train", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(ckpt)] + TRAIN) == 0
    return root


def test_train_outputs(workspace):
    ckpt = load_checkpoint(workspace / "m.ckpt")
    assert ckpt.registry.n_classes == 4 and ckpt.spec.patch_size == 32
    log = (workspace / "m.ckpt.log.csv").read_text().splitlines()
    assert log[0].startswith("# epoch") and len([l for l in log if not l.startswith("#")]) == 2


def test_eval_reports_and_ignores_training_flags(workspace):
    m = str(workspace / "data" / "manifest.csv")
    base = ["eval", "--checkpoint", str(workspace / "m.ckpt"), "--manifest", m, "--split", "TEST"]
    assert main(base + ["--out", str(workspace / "e1")]) == 0
    assert main(base + ["--out", str(workspace / "e2"), "--live-margin", "0.0", "--spoof-margin", "0.0",
                        "--scale", "5"]) == 0
    for name in ("scores.csv", "report.txt", "per_device.csv"):
        assert (workspace / "e1" / name).read_bytes() == (workspace / "e2" / name).read_bytes()
    scores = read_scores(workspace / "e1" / "scores.csv")
    assert len(scores) == 4 and all(0 <= s.score <= 1 for s in scores)
    rows = (workspace / "e1" / "per_device.csv").read_text().splitlines()
    assert {r.split(",")[0] for r in rows[1:]} >= {"a", "b"}
    # invalid training flags are still rejected
    assert main(base + ["--out", str(workspace / "e3"), "--spoof-margin", "0.9"]) != 0


def test_score_commands(workspace, capsys):
    ck = str(workspace / "m.ckpt")
    img = str(sorted((workspace / "data").rglob("*.pgm"))[0])
    capsys.readouterr()
    assert main(["score", "--checkpoint", ck, "--image", img]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith(img) and 0 <= float(line.split(",")[1]) <= 1
    assert main(["score-map", "--checkpoint", ck, "--image", img, "--stride", "16",
                 "--out", str(workspace / "map.pgm")]) == 0
    assert (workspace / "map.coords").exists()
    assert main(["retrieve", "--checkpoint", ck, "--image", img, "--top-k", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].startswith("rank") and len(out) == 6


def test_fewshot_command(workspace):
    m = str(workspace / "data" / "manifest.csv")
    refs = workspace / "refs.txt"
    assert main(["fewshot", "--checkpoint", str(workspace / "m.ckpt"), "--manifest", m, "--split", "TEST",
                 "--reference-split", "DEV", "--device", "b", "--shots", "2", "--save-references", str(refs),
                 "--out", str(workspace / "few")]) == 0
    assert refs.read_text().splitlines()[0] == "8 18"
    assert main(["fewshot", "--checkpoint", str(workspace / "m.ckpt"), "--manifest", m, "--split", "TEST",
                 "--references", str(refs), "--out", str(workspace / "few2")]) == 0


def test_config_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.epochs = 3\nsgd.learning_rate = 0.05\n")
    m = str(workspace / "data" / "manifest.csv")
    out = tmp_path / "m.ckpt"
    args = ["train", "--manifest", m, "--out", str(out), "--config", str(cfg)]
    flags = [a for a in TRAIN if a not in ("--epochs", "2")]
    assert main(args + flags) == 0
    ck = load_checkpoint(out)
    assert ck.config.epochs == 3
    assert ck.config.learning_rate == 0.01          # flag beats file
    assert main(args + flags + ["--epochs", "1"]) == 0
    assert load_checkpoint(out).config.epochs == 1


def test_gradcheck_command(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--trials", "5", "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    assert len(text) == 7 and text[-1].endswith("PASS")


def test_error_codes(workspace, tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", "--bogus"])
    assert err.value.code == 2
    assert main(["score", "--checkpoint", str(tmp_path / "none.ckpt"), "--image", "x.pgm"]) == 3
    bad = tmp_path / "bad.ckpt"
    data = bytearray((workspace / "m.ckpt").read_bytes())
    data[100] ^= 0xFF
    bad.write_bytes(bytes(data))
    assert main(["retrieve", "--checkpoint", str(bad), "--image", "x.pgm"]) == 6
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.nonsense = 1\n")
    assert main(["train", "--manifest", str(workspace / "data" / "manifest.csv"), "--out", str(tmp_path / "m"),
                 "--config", str(cfg)]) != 0
    assert "error" in capsys.readouterr().err
