import pytest

from glus.cli import run

TINY = ["model.d_model=16", "model.layers=2", "model.heads=2", "model.decoder_channels=4"]
SMALL_TRAIN = TINY + ["train.steps=2", "train.batch_size=2", "train.num_context=2", "train.num_query=2", "train.warmup_steps=1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["generate", "--out", str(root / "data"), "world.num_videos=3", "world.frames_per_video=5"]) == 0
    return root


def test_generate_layout(corpus):
    assert (corpus / "data" / "meta.json").is_file()
    assert len(list((corpus / "data" / "Frames").iterdir())) == 3


def test_pipeline(corpus, capsys):
    data, runs = corpus / "data", corpus / "runs" / "a"
    assert run(["train", "--data", str(data), "--out", str(runs), *SMALL_TRAIN, "train.checkpoint_every=1"]) == 0
    assert (runs / "step_2" / "checkpoint.pt").is_file() and (runs / "losses.jsonl").is_file()
    assert run(["infer", "--data", str(data), "--checkpoint", str(runs / "step_2"), "--out", str(corpus / "pred")]) == 0
    capsys.readouterr()
    assert run(["eval", "--data", str(data), "--predictions", str(corpus / "pred"), "--out", str(corpus / "eval")]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header.split("\t") == ["dataset", "J", "F", "J&F"]
    assert all(len(x.split(".")[1]) == 3 for x in row.split("\t")[1:])
    labels = corpus / "labels.jsonl"
    assert run(["annotate", "--data", str(data), "--checkpoint", str(runs / "step_1"), "--out", str(labels)]) == 0
    assert labels.read_text().count("\n") > 0
    sel = ["selector.d_model=16", "selector.layers=2", "selector.heads=2", "selector.steps=2", "selector.warmup_steps=1"]
    assert run(["train-selector", "--data", str(data), "--labels", str(labels), "--out", str(corpus / "sel"), *sel]) == 0
    out = corpus / "pred_kfs"
    assert run(["infer", "--data", str(data), "--checkpoint", str(runs / "step_2"), "--out", str(out), "--use-selector", "--selector", str(corpus / "sel")]) == 0
    assert len(list(out.glob("*/*/*.png"))) == len(list((corpus / "pred").glob("*/*/*.png")))


def test_usage_errors(corpus, capsys, tmp_path):
    assert run(["generate", "--out", str(tmp_path), "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["frobnicate"]) == 2
    capsys.readouterr()
    bad = tmp_path / "bad.cfg"
    bad.write_text("world.seed = 1\nworld.sed = 2\n")
    assert run(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and f"{bad}:2" in err
    assert run(["infer", "--data", str(corpus / "data"), "--checkpoint", "x", "--out", str(tmp_path), "--use-selector"]) == 2


def test_runtime_error_is_one_line(tmp_path, capsys):
    assert run(["infer", "--data", str(tmp_path / "missing"), "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "p")]) == 1
    err = capsys.readouterr().err.strip()
    fields = err.split("\t")
    assert err.count("\n") == 0 and fields[0] == "error" and fields[1] == "infer"


def test_help_lists_keys(capsys):
    with pytest.raises(SystemExit):
        run_help = __import__("glus.cli", fromlist=["build_parser"]).build_parser()
        run_help.parse_args(["train", "--help"])
    out = capsys.readouterr().out
    from glus.config import keys_for

    assert all(k in out for k in keys_for("train"))


def test_ablate_tiny(tmp_path, capsys):
    args = [
        "ablate", "--out", str(tmp_path),
        "world.num_videos=5", "world.frames_per_video=4", "ablate.valid_fraction=0.4",
        "ablate.seeds=0", "ablate.strides=1,3", "ablate.curve_snapshots=2",
        *SMALL_TRAIN, "train.steps=6",
        "selector.d_model=16", "selector.layers=2", "selector.heads=2", "selector.steps=2", "selector.warmup_steps=1", "selector.num_context=2",
    ]
    assert run(args) == 0
    table = (tmp_path / "ablation.tsv").read_text().splitlines()
    assert [l.split("\t")[0] for l in table[1:]] == ["Global", "Local", "+ GLU", "+ GLU + MB", "+ GLU + MB + OC", "+ GLU + MB + OC + KFS"]
    assert table[0].split("\t")[:4] == ["row", "J", "F", "J&F"]
    for name in ("ablation.png", "strides.tsv", "selector.tsv", "curve.csv", "curve.png", "report.txt"):
        assert (tmp_path / name).is_file(), name
    first = capsys.readouterr().out
    # a second run reuses every checkpoint and reproduces the table
    assert run(args) == 0
    assert (tmp_path / "ablation.tsv").read_text().splitlines() == table
