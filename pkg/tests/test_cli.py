import csv
import re

import pytest

from retina_dx.cli import EXIT_CHECK, EXIT_OK, EXIT_USAGE, main
from retina_dx.data_pipeline import load_manifest, synth_dataset
from retina_dx.nn import build_network, load_checkpoint, load_tensor, preset

# seed 7 with batch 4 ends the 20-epoch schedule at train_acc 1.0 on this set
OVERFIT_SEED = 7


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def synth20(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth20")
    synth_dataset(root, 10, 10, seed=0, size=128)
    return root


@pytest.fixture(scope="module")
def overfit_run(synth20, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    code = main(["train", "--manifest", str(synth20 / "manifest.csv"), "--out", str(out),
                 "--batch-size", "4", "--seed", str(OVERFIT_SEED)])
    assert code == EXIT_OK
    return out


def small_set(tmp_path, n_healthy=2, n_dr=2):
    synth_dataset(tmp_path / "data", n_healthy, n_dr, seed=3, size=48)
    return tmp_path / "data" / "manifest.csv"


# -- preprocess --------------------------------------------------------------

def test_preprocess_writes_tensors_and_index(tmp_path, capsys):
    manifest = small_set(tmp_path)
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(tmp_path / "pre")]) == EXIT_OK
    rows = read_csv(tmp_path / "pre" / "index.csv")
    assert rows[0] == ["source", "label", "tensor", "status"]
    assert len(rows) == 5 and all(r[3] == "ok" for r in rows[1:])
    tensors = sorted((tmp_path / "pre").glob("*.rdxt"))
    assert len(tensors) == 4
    for p in tensors:
        t = load_tensor(p)
        assert t.shape == (3, 64, 64)
        assert t.min() >= 0.0 and t.max() <= 1.0
    assert "4/4" in capsys.readouterr().out


def test_preprocess_idempotent(tmp_path):
    manifest = small_set(tmp_path)
    main(["preprocess", "--manifest", str(manifest), "--out", str(tmp_path / "a")])
    first = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    main(["preprocess", "--manifest", str(manifest), "--out", str(tmp_path / "a")])
    assert {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()} == first


def test_preprocess_bad_image_recorded(tmp_path):
    manifest = small_set(tmp_path)
    first = load_manifest(manifest).entries[0].path
    (tmp_path / "data" / first).write_bytes(b"P6\n4 4\n255\n\x00")
    code = main(["preprocess", "--manifest", str(manifest), "--out", str(tmp_path / "pre")])
    assert code == EXIT_USAGE
    rows = read_csv(tmp_path / "pre" / "index.csv")
    assert rows[1][3].startswith("error") and all(r[3] == "ok" for r in rows[2:])


# -- train -------------------------------------------------------------------

def test_train_outputs(overfit_run, capsys):
    rows = read_csv(overfit_run / "metrics.csv")
    assert len(rows) == 21
    assert rows[0] == ["epoch", "lr", "train_loss", "train_acc", "val_acc"]
    assert (overfit_run / "model.rdxc").is_file() and (overfit_run / "model.best.rdxc").is_file()
    split = read_csv(overfit_run / "split.csv")
    assert sum(r[1] == "train" for r in split[1:]) == 16


def test_train_reaches_full_training_accuracy(overfit_run):
    rows = read_csv(overfit_run / "metrics.csv")
    assert float(rows[-1][3]) == 1.0
    assert float(rows[-1][2]) < float(rows[1][2])


def test_best_checkpoint_holds_best_epoch(overfit_run, synth20, tmp_path):
    rows = read_csv(overfit_run / "metrics.csv")[1:]
    best = max(float(r[4]) for r in rows)
    code = main(["eval", "--checkpoint", str(overfit_run / "model.best.rdxc"),
                 "--manifest", str(synth20 / "manifest.csv"),
                 "--split", str(overfit_run / "split.csv"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    eval_rows = read_csv(tmp_path / "eval.csv")[1:]
    assert sum(r[1] == r[2] for r in eval_rows) / len(eval_rows) == best


def test_train_deterministic(tmp_path):
    manifest = small_set(tmp_path, 3, 3)
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / name),
                     "--epochs", "3", "--input-size", "32", "--seed", "5"]) == EXIT_OK
    for f in ("metrics.csv", "model.rdxc", "model.best.rdxc", "split.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_config_file_and_flag_override(tmp_path):
    manifest = small_set(tmp_path, 3, 3)
    cfg = tmp_path / "run.json"
    cfg.write_text('{"input_size": 32, "training": {"max_epochs": 2, "initial_lr": 0.05}}')
    assert main(["train", "--config", str(cfg), "--manifest", str(manifest),
                 "--out", str(tmp_path / "o"), "--epochs", "3"]) == EXIT_OK
    rows = read_csv(tmp_path / "o" / "metrics.csv")
    assert len(rows) == 4 and float(rows[1][1]) == 0.05
    assert load_checkpoint(tmp_path / "o" / "model.rdxc").config.input_shape == (3, 32, 32)


@pytest.mark.parametrize("extra", [["--epochs", "0"], ["--preset", "text3", "--input-size", "16"],
                                   ["--manifest", "missing.csv"], ["--lr", "-1"]])
def test_validation_failure_writes_nothing(tmp_path, extra):
    manifest = small_set(tmp_path)
    out = tmp_path / "never"
    argv = ["train", "--manifest", str(manifest), "--out", str(out)] + extra
    assert main(argv) == EXIT_USAGE
    assert not out.exists()


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"bogus": 1}')
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert not (tmp_path / "o").exists()


def test_unknown_command():
    assert main(["dance"]) == EXIT_USAGE


# -- eval --------------------------------------------------------------------

def test_eval_training_partition_of_overfit_model(overfit_run, synth20, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(overfit_run / "model.rdxc"),
                 "--manifest", str(synth20 / "manifest.csv"), "--split", str(overfit_run / "split.csv"),
                 "--partition", "train", "--out", str(tmp_path), "--min-accuracy", "1.0"])
    assert code == EXIT_OK
    assert "accuracy: 1.0000" in capsys.readouterr().out


def test_eval_whole_manifest_counts(overfit_run, synth20, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(overfit_run / "model.rdxc"),
                 "--manifest", str(synth20 / "manifest.csv"), "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    rows = read_csv(tmp_path / "eval.csv")
    assert rows[0] == ["path", "label", "predicted", "p_healthy", "p_dr_signs"]
    assert len(rows) - 1 == 20
    matrix = [[int(v) for v in line.split()] for line in out.strip().splitlines()[-2:]]
    assert sum(map(sum, matrix)) == 20
    acc = float(re.search(r"accuracy: ([0-9.]+)", out).group(1))
    assert acc == pytest.approx(sum(r[1] == r[2] for r in rows[1:]) / 20, abs=5e-5)


def test_eval_min_accuracy_failure(overfit_run, synth20, tmp_path):
    code = main(["eval", "--checkpoint", str(overfit_run / "model.rdxc"),
                 "--manifest", str(synth20 / "manifest.csv"), "--out", str(tmp_path),
                 "--min-accuracy", "1.01"])
    assert code == EXIT_CHECK


def test_eval_missing_checkpoint(tmp_path, capsys):
    manifest = small_set(tmp_path)
    code = main(["eval", "--checkpoint", str(tmp_path / "none.rdxc"), "--manifest", str(manifest)])
    assert code == EXIT_USAGE
    assert "checkpoint" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path):
    manifest = small_set(tmp_path)
    bad = tmp_path / "bad.rdxc"
    bad.write_bytes(b"RDXC\x01\x00")
    assert main(["eval", "--checkpoint", str(bad), "--manifest", str(manifest)]) == EXIT_USAGE


# -- predict -----------------------------------------------------------------

PREDICT_LINE = re.compile(r"^(healthy|dr_signs) healthy=([0-9.]+) dr_signs=([0-9.]+)$")


def predict(capsys, checkpoint, image):
    assert main(["predict", "--checkpoint", str(checkpoint), "--image", str(image)]) == EXIT_OK
    return capsys.readouterr().out.strip()


def test_predict_output(overfit_run, synth20, capsys):
    image = synth20 / "img" / "healthy_000.ppm"
    line = predict(capsys, overfit_run / "model.rdxc", image)
    m = PREDICT_LINE.match(line)
    assert m
    assert abs(float(m.group(2)) + float(m.group(3)) - 1.0) <= 0.001
    assert predict(capsys, overfit_run / "model.rdxc", image) == line


def test_predict_dr_training_image(overfit_run, synth20, capsys):
    split = read_csv(overfit_run / "split.csv")[1:]
    entries = load_manifest(synth20 / "manifest.csv").entries
    train_dr = [entries[int(i)] for i, part in split if part == "train" and entries[int(i)].label == "dr_signs"]
    line = predict(capsys, overfit_run / "model.rdxc", synth20 / train_dr[0].path)
    assert line.startswith("dr_signs ")


def test_predict_unreadable_image(overfit_run, tmp_path):
    junk = tmp_path / "junk.ppm"
    junk.write_bytes(b"GIF89a")
    assert main(["predict", "--checkpoint", str(overfit_run / "model.rdxc"), "--image", str(junk)]) == EXIT_USAGE


# -- gradcheck ---------------------------------------------------------------

def test_gradcheck_impossible_tolerance(capsys):
    assert main(["gradcheck", "--tolerance", "1e-12"]) == EXIT_CHECK
    out = capsys.readouterr().out
    names = [line.split()[0] for line in out.splitlines() if " rel " in line]
    expected = build_network(preset("table1", 10)).params
    assert len(names) == len(set(names)) == len(expected) == 12
    assert set(names) == set(expected)
    assert "FAIL" in out.splitlines()[-1]
