import io
import subprocess
import sys

import pytest

from stochformer.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from stochformer.data import CorpusEntry, load_corpus, write_index
from stochformer.training import TrainReport

SMALL_CFG = """\
# small model so the test runs in a second
model.max_frames=32
model.d_model=8
model.n_heads=2
model.ffn_hidden=16
model.lcn_filters=4
model.head_lwta=4
model.head_dense=4,1
epochs=3
batch_size=4
patience=0
"""


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A corpus of pre-extracted MFCC files and a checkpoint trained on it via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert call("synth", "--n", 12, "--duration", 0.3, "--seed", 3, "--out", root / "wav")[0] == EXIT_OK
    wav_index = load_corpus(root / "wav")
    mf = root / "mfcc"
    mf.mkdir()
    entries = []
    for e in wav_index.entries:
        assert call("extract", wav_index.resolve(e), mf / f"{e.id}.mfcc")[0] == EXIT_OK
        entries.append(CorpusEntry(e.id, f"{e.id}.mfcc", e.pcl_c, e.split))
    write_index(mf, entries)
    (root / "small.cfg").write_text(SMALL_CFG)
    ckpt = root / "model.ckpt"
    code, out, err = call("train", "--corpus", mf, "--config", root / "small.cfg", "--out", ckpt, "--seed", 1)
    assert code == EXIT_OK, err
    return root, mf, ckpt, out, err


def test_no_arguments():
    code, _, err = call()
    assert code == EXIT_USAGE and "usage:" in err


def test_unknown_flag():
    assert call("synth", "--out", "x", "--bogus")[0] == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert run(["--help"]) == EXIT_OK


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert call("synth", "--n", 4, "--seed", 7, "--duration", 0.2, "--out", tmp_path / name)[0] == EXIT_OK
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_prints_config_and_seed(trained):
    _, _, _, _, err = trained
    assert "# seed=1" in err and "# model.d_model=8" in err and "# train.epochs=3" in err


def test_train_outputs(trained):
    root, _, ckpt, out, _ = trained
    report = TrainReport.from_text((root / "model.ckpt.report.tsv").read_text())
    assert len(report.epochs) == 3
    assert f"best_val_rmse={report.best_val_rmse!r}" in out
    assert (root / "model.ckpt.timing.tsv").exists()


def test_eval_reproduces_report(trained):
    root, mf, ckpt, _, _ = trained
    report = TrainReport.from_text((root / "model.ckpt.report.tsv").read_text())
    code, out, _ = call("eval", "--ckpt", ckpt, "--corpus", mf, "--split", "val")
    assert code == EXIT_OK
    kv = dict(line.split("=", 1) for line in out.splitlines() if "=" in line and " " not in line)
    assert float(kv["rmse"]) == report.best_val_rmse


def test_eval_on_wav_corpus_matches(trained):
    root, mf, ckpt, _, _ = trained
    a = call("eval", "--ckpt", ckpt, "--corpus", mf, "--split", "test")[1]
    b = call("eval", "--ckpt", ckpt, "--corpus", root / "wav", "--split", "test", "--threads", 2)[1]
    assert a == b


def test_predict_one_score(trained):
    root, _, ckpt, _, _ = trained
    code, out, _ = call("predict", "--ckpt", ckpt, root / "wav" / "300_P" / "300_AUDIO.wav")
    assert code == EXIT_OK
    assert len(out.split()) == 1 and float(out)


def test_train_reproducible(trained, tmp_path):
    root, mf, ckpt, _, _ = trained
    again = tmp_path / "again.ckpt"
    assert call("train", "--corpus", mf, "--config", root / "small.cfg", "--out", again, "--seed", 1)[0] == EXIT_OK
    assert again.read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "again.ckpt.report.tsv").read_bytes() == (root / "model.ckpt.report.tsv").read_bytes()


def test_set_override_and_unknown_key(trained, tmp_path):
    _, mf, _, _, _ = trained
    code, _, err = call("train", "--corpus", mf, "--out", tmp_path / "x", "--set", "nonsense=1")
    assert code == EXIT_USAGE and "nonsense" in err


def test_data_errors(tmp_path):
    assert call("eval", "--ckpt", tmp_path / "missing", "--corpus", tmp_path)[0] == EXIT_DATA
    assert call("extract", tmp_path / "missing.wav", tmp_path / "o")[0] == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure(trained, tmp_path):
    _, mf, _, _, _ = trained
    code, _, err = call("train", "--corpus", mf, "--out", tmp_path / "x", "--set", "model.max_frames=32",
                        "--set", "model.d_model=8", "--set", "model.n_heads=2", "--set", "lr=1e300",
                        "--epochs", 3, "--batch-size", 4)
    assert code == EXIT_NUMERIC and "numeric failure" in err


def test_gradcheck_small():
    code, out, _ = call("gradcheck", "--trials", 1)
    assert code == EXIT_OK
    assert out.count("PASS") == 11 and "gradcheck passed" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "stochformer"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "usage:" in proc.stderr
