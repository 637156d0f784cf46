import csv

import pytest

from attnscene.checkpoint import load_checkpoint
from attnscene.cli import main, parse_grid
from attnscene.config import RunConfig
from attnscene.errors import ConfigError
from attnscene.synth import SynthConfig

QUICK = ["--set", "train.max_epochs=1", "--set", "train.eval_period=1", "--set", "train.batch_size=9"]


@pytest.fixture(scope="module")
def runs(tiny_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for mode in ("attention", "maxpool"):
        assert main(["train", "--data", str(tiny_corpus), "--out", str(root / mode), "--seed", "3",
                     "--set", f"model.pooling_mode={mode}", *QUICK]) == 0
    return root


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("synth", "cache", "train", "eval", "attend", "gradcheck", "sweep"):
        assert cmd in out


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth"])
    assert info.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_synth_same_seed_identical(tmp_path):
    args = ["--set", "synth.n_train=3", "--set", "synth.n_dev=1", "--set", "synth.n_eval=1",
            "--set", "synth.clip_seconds=2", "--set", "synth.events_per_clip=2,2", "--seed", "5"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    for f in sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_bad_config_key_exit_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "synth.bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_data_dir_exit_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 3


def test_cache_command(tiny_corpus, tmp_path):
    assert main(["cache", "--data", str(tiny_corpus), "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "train").glob("*.afc"))) == 18
    assert (tmp_path / "classes.csv").exists() and (tmp_path / "eval" / "events.csv").exists()
    # the cache directory is itself a loadable dataset
    assert main(["cache", "--data", str(tiny_corpus), "--out", str(tmp_path)]) == 0


def test_train_outputs_and_logged_config(runs):
    run = runs / "attention"
    assert {p.name for p in run.iterdir()} >= {"metrics.csv", "best.ckpt", "last.ckpt", "config.txt"}
    logged = RunConfig.load(overrides=(run / "config.txt").read_text().splitlines())
    ck = load_checkpoint(run / "best.ckpt").config
    expected = logged.to_dict()
    assert ck["model"] == expected["model"]
    assert ck["train"] == expected["train"] and ck["features"] == expected["features"]
    assert SynthConfig(**ck["extra"]["synth"]) == logged.synth
    assert logged.train.seed == logged.model.seed == 3


def test_maxpool_routing(runs):
    assert load_checkpoint(runs / "maxpool" / "best.ckpt").config["model"]["pooling_mode"] == "maxpool"


@pytest.mark.parametrize("mode", ["attention", "maxpool"])
def test_eval_both_checkpoints(runs, tiny_corpus, tmp_path, capsys, mode):
    out = tmp_path / "m.csv"
    assert main(["eval", "--ckpt", str(runs / mode / "best.ckpt"), "--data", str(tiny_corpus), "--out", str(out)]) == 0
    assert "Overall" in capsys.readouterr().out
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 and rows[-1]["class"] == "overall"


def test_eval_empty_split_exit_2(runs, tmp_path):
    split = tmp_path / "ds" / "eval"
    split.mkdir(parents=True)
    (split / "manifest.csv").write_text("clip_id,channel,class_index,path\n")
    code = main(["eval", "--ckpt", str(runs / "attention" / "best.ckpt"), "--data", str(tmp_path / "ds")])
    assert code == 2


def test_eval_corrupt_checkpoint_exit_3(runs, tiny_corpus, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((runs / "attention" / "best.ckpt").read_bytes()[:-50])
    assert main(["eval", "--ckpt", str(bad), "--data", str(tiny_corpus)]) == 3


def test_attend_rows_and_snippets(runs, tiny_corpus, tmp_path):
    out = tmp_path / "att"
    assert main(["attend", "--ckpt", str(runs / "attention" / "best.ckpt"), "--data", str(tiny_corpus),
                 "--out", str(out), "--snippets"]) == 0
    with (out / "alignments.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 9 * 9
    assert len(list((out / "snippets").glob("*.wav"))) == 9 * 9


def test_attend_maxpool_exit_2(runs, tiny_corpus, tmp_path, capsys):
    code = main(["attend", "--ckpt", str(runs / "maxpool" / "best.ckpt"), "--data", str(tiny_corpus),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "maxpool" in capsys.readouterr().err


def test_resume_flag(runs, tiny_corpus):
    run = runs / "attention"
    before = (run / "metrics.csv").read_text().splitlines()
    assert main(["train", "--data", str(tiny_corpus), "--out", str(run), "--resume", "--seed", "3", *QUICK]) == 0
    # the stored epoch cap is already reached: nothing new is trained
    assert (run / "metrics.csv").read_text().splitlines() == before


def test_gradcheck_passes_and_corrupt_hook_fails(capsys):
    assert main(["gradcheck", "--max-coords", "3"]) == 0
    assert "gradcheck passed" in capsys.readouterr().out
    assert main(["gradcheck", "--max-coords", "3", "--corrupt", "attention.V"]) == 4
    assert "attention.V" in capsys.readouterr().err


def test_parse_grid():
    assert parse_grid("M=1,3,5;sigma=0.1,1.0") == {"M": [1, 3, 5], "sigma": [0.1, 1.0]}
    assert parse_grid("sigma=0.2") == {"sigma": [0.2]}
    for bad in ("K=1", "M=one", "M"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_sweep_command(tiny_corpus, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--grid", "M=1,2;sigma=1.0", "--data", str(tiny_corpus), "--out", str(out),
                 "--fixed-M", "2", "--fixed-sigma", "1.0", *QUICK]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "sweep,M,sigma,dev_macro_f1" and len(lines) == 4
    assert (tmp_path / "sweep" / "config.txt").exists()
    assert main(["sweep", "--grid", "Q=1", "--data", str(tiny_corpus), "--out", str(out)]) == 2
