import filecmp
import shutil

import pytest

from cascadetrack import cli
from cascadetrack import dataio as D

TINY = """
# small and fast
arch.attn_channels = 4,4,4
arch.channels = 4,4,4
arch.merge_channels = 4
arch.feature_dim = 16
arch.lstm_hidden = 8
arch.mask_dim = 2
synth.n_frames = 10
synth.n_sequences = 5
train.max_epochs = 2
train.attn_epochs = 1
train.batch_frames = 5
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    assert cli.main(["synth", "--config", str(d / "tiny.cfg"), "--out", str(d / "data")]) == 0
    return d


@pytest.fixture(scope="module")
def model(work):
    out = work / "m.ck"
    assert cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--out", str(out)]) == 0
    return out


def test_synth_writes_sequences(work):
    dirs = D.sequence_dirs(work / "data")
    assert [d.name for d in dirs] == [f"SYN-{i:04d}" for i in range(5)]
    assert D.load_sequence(dirs[0]).n_frames == 10


def test_train_writes_checkpoint_and_history(model):
    assert model.exists()
    assert model.with_name("m.ck.loss.csv").read_text().startswith("epoch,L,Lcls,Lmask,Lbox,Latt")
    assert model.with_name("m.ck.loss.png").stat().st_size > 0


def test_track_eval_pipeline(work, model):
    seq = work / "data" / "SYN-0001"
    track = work / "t.csv"
    assert cli.main(["track", "--model", str(model), "--seq", str(seq), "--out", str(track)]) == 0
    assert cli.main(["eval", "--track", str(track), "--seq", str(seq), "--out", str(work / "rep")]) == 0
    assert (work / "rep.csv").read_text().splitlines()[0] == "source,N,mean_mm,std_mm,p95_mm,ave_max_mm"
    for suffix in ("_errors.png", "_landmarks.png", "_hist.png"):
        assert (work / f"rep{suffix}").stat().st_size > 0


def test_eval_on_ground_truth_is_zero(work):
    seq = work / "data" / "SYN-0002"
    b = D.load_sequence(seq)
    gt = work / "gt.csv"
    gt.write_text("frame,landmark_id,x,y,score\n" + "".join(
        f"{fi},{lid},{x!r},{y!r},1.0\n" for lid, rows in b.landmarks.items() for fi, x, y in rows))
    assert cli.main(["eval", "--track", str(gt), "--seq", str(seq), "--out", str(work / "gt"), "--no-plots"]) == 0
    row = (work / "gt.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "SYN" and all(float(v) == 0.0 for v in row[2:])


def test_outputs_are_byte_identical_across_runs(work, model):
    again = work / "m2.ck"
    assert cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(work / "data"),
                     "--out", str(again), "--no-plots"]) == 0
    assert filecmp.cmp(model, again, shallow=False)
    seq = work / "data" / "SYN-0003"
    a, b = work / "a.csv", work / "b.csv"
    cli.main(["track", "--model", str(model), "--seq", str(seq), "--out", str(a)])
    cli.main(["track", "--model", str(again), "--seq", str(seq), "--out", str(b)])
    assert filecmp.cmp(a, b, shallow=False)


def test_bench(work, model, capsys):
    out = work / "fps.txt"
    assert cli.main(["bench", "--model", str(model), "--seq", str(work / "data" / "SYN-0000"),
                     "--set", "bench.warmup=2", "--out", str(out)]) == 0
    assert out.read_text().startswith("fps ")


def test_xval(work):
    cfg = work / "tiny.cfg"
    assert cli.main(["xval", "--config", str(cfg), "--data", str(work / "data"), "--out", str(work / "xv"),
                     "--no-plots", "--set", "train.max_epochs=1"]) == 0
    assert all((work / "xv" / f"fold{k}.csv").exists() for k in range(5))
    assert (work / "xv" / "pooled.txt").read_text().startswith("Source")


def test_missing_first_frame_annotation_is_data_error(work, tmp_path, capsys):
    seq = tmp_path / "s"
    shutil.copytree(work / "data" / "SYN-0000", seq)
    lines = (seq / "landmark_1.csv").read_text().splitlines()
    (seq / "landmark_1.csv").write_text("\n".join([lines[0]] + lines[2:]) + "\n")
    assert cli.main(["train", "--config", str(work / "tiny.cfg"), "--data", str(seq),
                     "--out", str(tmp_path / "m.ck")]) == cli.EXIT_DATA
    assert "first-frame" in capsys.readouterr().err


@pytest.mark.parametrize("args", [["--set", "arch.nope=1"], ["--set", "train.max_epochs=x"],
                                  ["--set", "train.preset=fast"], ["--set", "select.tradeoff_gamma=2"]])
def test_config_errors(tmp_path, args):
    assert cli.main(["synth", "--out", str(tmp_path / "o")] + args) == cli.EXIT_CONFIG


def test_preset_key_applies_fixed_values(tmp_path):
    cfg = cli.build_config(overrides=["train.preset=paper"])
    t = cfg.train()
    assert (t.learning_rate, t.max_epochs, t.delta_stop) == (1e-6, 1000, 1e-3)


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for key in cli.schema():
        assert key in text
