import pytest

from radlab import report as R
from radlab.cli import main

from helpers import write_fast_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, write_fast_config(root)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_stagewise_verbs(workspace, capsys):
    root, cfg = workspace
    out = str(root / "run")
    code, text, _ = run(capsys, "synth", "--config", str(cfg), "--out", out)
    assert code == 0 and "train" in text
    assert (root / "run" / "corpus" / "train.jsonl").is_file()
    assert run(capsys, "tokenize", "--config", str(cfg), "--out", out)[0] == 0
    assert (root / "run" / "vocab.txt").is_file()
    code, text, _ = run(capsys, "pretrain", "--config", str(cfg), "--out", out)
    assert code == 0 and "pretrain-general" in text and "pretrain-clinical" in text
    code, text, _ = run(capsys, "midtrain", "--config", str(cfg), "--out", out)
    assert "['pretrain', 'midtrain']" in text
    code, text, _ = run(capsys, "finetune", "--config", str(cfg), "--out", out)
    assert code == 0 and len(R.load_records(root / "run" / "records.csv")) == 3
    ckpt = root / "run" / "checkpoints" / "finetune-midtrain-full-s0.ckpt"
    code, text, _ = run(capsys, "eval", "--config", str(cfg), "--out", out, "--checkpoint", str(ckpt), "--label", "+midtrain")
    assert code == 0 and (root / "run" / "summaries_+midtrain.jsonl").is_file()
    code, text, _ = run(capsys, "compare", "--config", str(cfg), "--out", out)
    assert code == 0 and "ROUGE-L" in text


def test_sweep_and_curves(workspace, capsys):
    root, cfg = workspace
    out = root / "sweep"
    assert run(capsys, "sweep", "--config", str(cfg), "--out", str(out), "--seed", "3")[0] == 0
    records = R.load_records(out / "records.csv")
    assert len(records) == 9
    code, text, _ = run(capsys, "render", "--config", str(cfg), "--out", str(out / "report"),
                        "--records", str(out / "records.csv"), "--mode", "curves", "--overlay")
    assert code == 0
    svg = (out / "report" / "curve_rouge_l.svg").read_text()
    assert len(R.parse_polylines(svg)) == 3 and 'class="published"' in svg


def test_fixture_table_and_compare(tmp_path, capsys):
    code, text, _ = run(capsys, "render", "--fixture", "--out", str(tmp_path))
    assert code == 0 and "**0.6362**" in text and (tmp_path / "table.csv").is_file()
    code, text, _ = run(capsys, "compare", "--fixture")
    line = next(l for l in text.splitlines() if l.split()[0] == "3B" and "Entity F1" in l)
    assert line.index("general-only (0.5495)") < line.index("+clinical-pretrain (0.5428)")


def test_errors_exit_two(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--config", str(tmp_path / "missing.ini"))
    assert code == 2 and "not found" in err
    code, _, err = run(capsys, "render", "--out", str(tmp_path), "--records", str(tmp_path / "none.csv"))
    assert code == 2 and "no records file" in err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    code, _, err = run(capsys, "eval", "--out", str(tmp_path / "o"), "--checkpoint", str(bad))
    assert code == 2


def test_unknown_verb():
    with pytest.raises(SystemExit):
        main(["launch"])
