import json

import numpy as np
import pytest

from dar_forge import cli, data, zoo

from conftest import MNIST_DIR
import pathlib

GOLDEN = pathlib.Path(__file__).parent / "golden"
COMMANDS = ("train", "evaluate", "attack", "sweep", "report")


@pytest.fixture
def digit_ppm(tmp_path, mnist_test):
    path = tmp_path / "digit.ppm"
    path.write_bytes(data.write_ppm(data.to_channels(mnist_test.images[0], 3)))
    return path


def test_train_missing_data_exit_3(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code = cli.main(["train", "--model", "dar_small", "--data", str(missing), "--out", str(tmp_path / "m.darw")])
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_train_unknown_spec_exit_2(tmp_path, capsys):
    code = cli.main(["train", "--model", "vgg", "--data", str(MNIST_DIR), "--out", str(tmp_path / "m.darw")])
    assert code == 2
    err = capsys.readouterr().err
    assert all(name in err for name in zoo.SPEC_NAMES)


def test_train_writes_loadable_checkpoint(tmp_path, capsys):
    out = tmp_path / "m.darw"
    code = cli.main(["train", "--model", "dar_small", "--data", str(MNIST_DIR), "--out", str(out),
                     "--epochs", "1", "--seed", "3"])
    assert code == 0
    assert zoo.load_checkpoint(out).name == "dar_small"
    assert "train_accuracy=" in capsys.readouterr().out


def test_evaluate(checkpoint_dir, capsys):
    code = cli.main(["evaluate", "--checkpoint", str(checkpoint_dir / "dar_small.darw"), "--data", str(MNIST_DIR)])
    assert code == 0
    acc = float(capsys.readouterr().out.split("accuracy=")[1].split()[0])
    assert acc >= 0.95


def test_evaluate_corrupt_checkpoint_exit_3(tmp_path, checkpoint_dir):
    bad = tmp_path / "bad.darw"
    blob = bytearray((checkpoint_dir / "dar_small.darw").read_bytes())
    blob[100] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert cli.main(["evaluate", "--checkpoint", str(bad), "--data", str(MNIST_DIR)]) == 3


def test_attack_dar_metadata(tmp_path, checkpoint_dir, digit_ppm, capsys):
    out = tmp_path / "out"
    code = cli.main(["attack", "--checkpoint", str(checkpoint_dir / "dar_small.darw"),
                     "--image", str(digit_ppm), "--out", str(out)])
    assert code == 0
    rec = json.loads((out / "result.json").read_text())
    assert rec["method"] == "dar-pgd" and len(rec["centers"]) == 1
    assert {"orig_conf", "adv_conf", "size", "count", "epsilon"} <= set(rec)
    assert "orig_conf=" in capsys.readouterr().out


def test_attack_output_ppm_round_trip(tmp_path, checkpoint_dir, digit_ppm):
    out = tmp_path / "out"
    assert cli.main(["attack", "--checkpoint", str(checkpoint_dir / "dar_small.darw"), "--image", str(digit_ppm),
                     "--method", "pgd", "--out", str(out)]) == 0
    model = zoo.load_checkpoint(checkpoint_dir / "dar_small.darw")
    image = data.to_channels(data.read_ppm(digit_ppm.read_bytes()), 1)
    from dar_forge import attacks
    adv = attacks.pgd(model, image, json.loads((out / "result.json").read_text())["label"],
                      attacks.AttackConfig()).adversarial
    back = data.to_channels(data.read_ppm((out / "adversarial.ppm").read_bytes()), 1)
    assert np.abs(back - adv).max() <= 1 / 510 + 1e-7


@pytest.mark.parametrize("method", ["fgsm", "pgd", "uap", "opa", "dar"])
def test_attack_zero_epsilon_identical_confidences(tmp_path, checkpoint_dir, digit_ppm, capsys, method):
    args = ["attack", "--checkpoint", str(checkpoint_dir / "dar_small.darw"), "--image", str(digit_ppm),
            "--method", method, "--epsilon", "0", "--out", str(tmp_path / method)]
    assert cli.main(args) == 0
    out = capsys.readouterr().out.split()
    if method != "opa":
        assert out[0].split("=")[1] == out[1].split("=")[1]
    else:
        # the search may still find a confidence-lowering pixel: it ignores epsilon
        assert float(out[1].split("=")[1]) <= float(out[0].split("=")[1])


def test_sweep_and_report(tmp_path, checkpoint_dir, capsys):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--data", str(MNIST_DIR), "--checkpoints", str(checkpoint_dir),
                     "--size", "2", "--count", "1", "--method", "pgd", "--images", "1", "--out", str(out)])
    assert code == 0
    from dar_forge import bench
    recs = bench.read_records((out / "records.jsonl").read_bytes())
    dar_recs = [r for r in recs if r.method == "pgd"]
    assert len(dar_recs) == 3 and sum(r.is_white_box for r in dar_recs) == 1
    meta = json.loads((out / "sweep_meta.json").read_text())
    assert set(meta["checksums"]) == set(zoo.SPEC_NAMES)

    for fmt, name in (("csv", "sweep.csv"), ("markdown", "sweep.md")):
        target = tmp_path / f"again.{fmt}"
        assert cli.main(["report", "--records", str(out / "records.jsonl"), "--format", fmt, "--out", str(target)]) == 0
        assert target.read_bytes() == (out / name).read_bytes()
    capsys.readouterr()
    assert cli.main(["report", "--records", str(out / "records.jsonl"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.encode() == (out / "sweep.csv").read_bytes()


def test_report_garbage_exit_3(tmp_path):
    bad = tmp_path / "r.jsonl"
    bad.write_text("{not json\n")
    assert cli.main(["report", "--records", str(bad)]) == 3


def test_config_unknown_key_exit_2(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("[train]\nepochs = 1\nmomentum = 0.9\n")
    assert cli.main(["train", "--config", str(conf), "--model", "dar_small", "--data", str(MNIST_DIR),
                     "--out", str(tmp_path / "m.darw")]) == 2


def test_config_parsing():
    conf = cli.parse_config_text("[sweep]\nsizes = 2, 6\nmethods = pgd\n[dar]\ncolor_gains = 1,0.9,1.1\n")
    assert conf["sweep"]["sizes"] == (2, 6) and conf["sweep"]["methods"] == ("pgd",)
    assert conf["dar"]["color_gains"] == (1.0, 0.9, 1.1)
    for text in ("[nope]\na = 1\n", "[train]\nepochs = many\n", "epochs = 1\n"):
        with pytest.raises(cli.ConfigError):
            cli.parse_config_text(text)


def test_seed_resolution(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "17")
    assert cli.resolve_seed(None) == 17
    assert cli.resolve_seed(5) == 5
    monkeypatch.setenv(cli.SEED_ENV, "x")
    with pytest.raises(cli.ConfigError):
        cli.resolve_seed(None)
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.resolve_seed(None) == 0


def help_text(command, monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "100")
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"] if command else ["--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("command", ("",) + COMMANDS)
def test_help_golden(command, monkeypatch, capsys):
    text = help_text(command, monkeypatch, capsys)
    assert text == (GOLDEN / f"help_{command or 'main'}.txt").read_text()
