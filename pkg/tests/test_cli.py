import pytest

from plnet import tensor as T
from plnet.cli import main

TINY = ["--image-size", "16x8", "--layers", "3:4:1:1:2;3:6:1:1:0"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--identities", "4", "--per-id", "4",
                 "--height", "16", "--width", "8", "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data" / "manifest.tsv"), "--out", str(root / "run"),
                 "--k", "2", "--max-iter", "6", "--batch-size", "4", *TINY]) == 0
    return root


def test_no_arguments(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["nonsense"],
    ["gradcheck", "--bogus"],
    ["synth"],
    ["gradcheck", "--seed", "x"],
    ["gradcheck", "--threads", "0"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_invalid_option_value_is_usage_error(workspace, capsys):
    argv = ["train", "--data", str(workspace / "data" / "manifest.tsv"), "--out", str(workspace / "bad"), "--lr", "-1"]
    assert main(argv) == 1
    assert "learning rate" in capsys.readouterr().err


def test_runtime_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "r")]) == 2
    assert "missing.tsv" in capsys.readouterr().err


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for command in ("synth", "train", "parts", "extract", "eval", "gradcheck", "ablate"):
        assert command in out


def test_synth_is_reproducible(workspace, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--identities", "4", "--per-id", "4",
                 "--height", "16", "--width", "8", "--seed", "3"]) == 0
    for name in ("manifest.tsv", "images/0001_c1_000.ppm", "images/0004_c2_003.ppm"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_train_outputs(workspace):
    lines = (workspace / "run" / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,global_loss,part_loss_1,part_loss_2,total"
    assert len(lines) == 7
    assert (workspace / "run" / "checkpoint" / "manifest.txt").exists()


def test_train_is_reproducible(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data" / "manifest.tsv"), "--out", str(tmp_path),
                 "--k", "2", "--max-iter", "6", "--batch-size", "4", *TINY]) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (workspace / "run" / "loss.csv").read_bytes()
    for f in (workspace / "run" / "checkpoint").iterdir():
        assert (tmp_path / "checkpoint" / f.name).read_bytes() == f.read_bytes()


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("max_iter = 3\nparts = 1\nlr = 0.01\n")
    data = str(workspace / "data" / "manifest.tsv")
    assert main(["train", "--data", data, "--out", str(tmp_path / "a"), "--config", str(cfg), *TINY]) == 0
    assert (tmp_path / "a" / "loss.csv").read_text().splitlines()[0].endswith("part_loss_1,total")
    assert main(["train", "--data", data, "--out", str(tmp_path / "b"), "--config", str(cfg), "--k", "3", *TINY]) == 0
    rows = (tmp_path / "b" / "loss.csv").read_text().splitlines()
    assert rows[0].endswith("part_loss_3,total") and len(rows) == 4
    assert rows[1].split(",")[1] == "0.01"


def test_parts(workspace, tmp_path, capsys):
    argv = ["parts", "--checkpoint", str(workspace / "run" / "checkpoint"),
            "--data", str(workspace / "data" / "manifest.tsv"), "--split", "query", "--saliency-dir", str(tmp_path)]
    assert main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 * 4  # 2 test identities × 2 cameras, two parts each
    for line in lines:
        image_id, k, top, bottom, left, right = line.split()
        assert image_id.endswith(".ppm") and k in ("1", "2")
        assert 0 <= int(top) <= int(bottom) < 8 and 0 <= int(left) <= int(right) < 4
    saliency = T.load_pltn(next(tmp_path.glob("*.part1.pltn")))
    assert saliency.shape == (8, 4) and saliency.min() >= 0 and saliency.max() <= 1


def test_extract_and_eval(workspace, tmp_path, capsys):
    ck, data = str(workspace / "run" / "checkpoint"), str(workspace / "data" / "manifest.tsv")
    for split in ("query", "gallery"):
        assert main(["extract", "--checkpoint", ck, "--data", data, "--split", split,
                     "--out", str(tmp_path / f"{split}.pltn")]) == 0
    matrix = T.load_pltn(tmp_path / "query.pltn")
    assert matrix.shape == (4, 3 * 6)
    index = (tmp_path / "query.pltn.txt").read_text().splitlines()
    assert [len(line.split()) for line in index] == [4] * 4
    capsys.readouterr()
    assert main(["eval", "--query", str(tmp_path / "query.pltn"), "--gallery", str(tmp_path / "gallery.pltn"),
                 "--method", "final", "--out", str(tmp_path / "report.csv")]) == 0
    table = capsys.readouterr().out
    assert table.split()[:5] == ["method", "mAP", "Rank-1", "Rank-5", "Rank-10"]
    csv = (tmp_path / "report.csv").read_text().splitlines()
    assert csv[0] == "method,mAP,Rank-1,Rank-5,Rank-10" and csv[1].startswith("final,")
    assert (tmp_path / "report.txt").read_text() == table


def test_eval_from_checkpoint_is_reproducible(workspace, tmp_path, capsys):
    argv = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint"), "--data", str(workspace / "data" / "manifest.tsv")]
    assert main(argv + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    assert [line.split(",")[0] for line in a.splitlines()[1:]] == ["global", "final", "part-1", "part-2"]


def test_eval_needs_inputs(capsys):
    assert main(["eval"]) == 1


def test_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "7", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("max relative error")
    assert float(out.split()[-1]) < 1e-4


def test_ablate(tmp_path, capsys):
    argv = ["ablate", "--preset", "with-vs-without-partloss", "--runs", "2", "--identities", "4", "--per-id", "4",
            "--max-iter", "3", "--batch-size", "4", "--k", "2", "--out", str(tmp_path / "r.csv"), *TINY]
    assert main(argv) == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["with part loss", "without part loss"]
    assert "of 2 runs" in capsys.readouterr().out
    assert main(argv[:-len(TINY) - 2] + ["--out", str(tmp_path / "t.csv"), "--threads", "2", *TINY]) == 0
    assert (tmp_path / "t.csv").read_text() == (tmp_path / "r.csv").read_text()
