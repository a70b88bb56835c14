import numpy as np
import pytest

from stochformer.data import (Corpus, CorpusEntry, CorpusIndex, SyntheticSpec, assign_splits,
                              batch_iterator, generate_synthetic, load_corpus, load_features,
                              pad_batch, ridge_learnability, tone_parameters, write_index)
from stochformer.dsp import MfccMatrix, extract_mfcc, read_wav, write_mfcc
from stochformer.errors import ConfigError, DataLoadError


def write_rows(root, rows, header="id,path,pcl_c,split"):
    (root / "index.csv").write_text("\n".join([header, *rows]) + "\n")


class TestLoadCorpus:
    def test_empty_index(self, tmp_path):
        write_rows(tmp_path, [])
        assert len(load_corpus(tmp_path)) == 0

    def test_missing_file(self, tmp_path):
        write_rows(tmp_path, ["301,301_P/301_AUDIO.wav,40,train"])
        with pytest.raises(DataLoadError, match=r"301.*301_P/301_AUDIO\.wav"):
            load_corpus(tmp_path)

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "a.csv").write_text("mfcc,v1,0,13,25,10\n")
        write_rows(tmp_path, ["1,a.csv,4,train", "1,a.csv,5,val"])
        with pytest.raises(DataLoadError, match="duplicate id 1"):
            load_corpus(tmp_path)

    @pytest.mark.parametrize("score", ["abc", "nan", "inf"])
    def test_bad_score(self, tmp_path, score):
        (tmp_path / "a.csv").write_text("mfcc,v1,0,13,25,10\n")
        write_rows(tmp_path, [f"7,a.csv,{score},train"])
        with pytest.raises(DataLoadError, match="7"):
            load_corpus(tmp_path)

    def test_bad_header(self, tmp_path):
        write_rows(tmp_path, [], header="id,file,score")
        with pytest.raises(DataLoadError):
            load_corpus(tmp_path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataLoadError):
            load_corpus(tmp_path)

    def test_mixed_wav_and_mfcc(self, small_corpus_dir, tmp_path):
        src = load_corpus(small_corpus_dir)
        entry = src.entries[0]
        wav = src.resolve(entry)
        (tmp_path / "w").mkdir()
        (tmp_path / "w" / "a.wav").write_bytes(wav.read_bytes())
        write_mfcc(tmp_path / "b.mfcc", extract_mfcc(read_wav(wav)))
        write_index(tmp_path, [CorpusEntry("a", "w/a.wav", 10.0, "train"),
                               CorpusEntry("b", "b.mfcc", 10.0, "train")])
        corpus = load_features(load_corpus(tmp_path))
        a, b = corpus.features["a"], corpus.features["b"]
        assert a.values.shape == b.values.shape
        assert np.array_equal(a.values, b.values)

    def test_threads_match_serial(self, small_corpus_dir):
        index = load_corpus(small_corpus_dir)
        one = load_features(index, threads=1)
        many = load_features(index, threads=3)
        assert all(np.array_equal(one.features[k].values, many.features[k].values) for k in one.features)


class TestSynthetic:
    def test_empty(self, tmp_path):
        assert len(generate_synthetic(SyntheticSpec(n_participants=0), tmp_path)) == 0
        assert len(load_corpus(tmp_path)) == 0

    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(n_participants=3, duration_s=0.2, seed=9)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_layout(self, small_corpus_dir):
        index = load_corpus(small_corpus_dir)
        assert index.entries[0].path == "300_P/300_AUDIO.wav"
        assert all(17 <= e.pcl_c <= 85 for e in index.entries)

    def test_splits_disjoint_and_sized(self):
        tags = assign_splits(64, SyntheticSpec())
        assert (tags.count("train"), tags.count("val"), tags.count("test")) == (45, 10, 9)

    def test_tones_increase_with_score(self):
        spec = SyntheticSpec()
        lo, hi = tone_parameters(spec.score_lo, spec), tone_parameters(spec.score_hi, spec)
        assert lo == (250.0, 1500.0, 2.0) and hi == (750.0, 3000.0, 8.0)

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(train_frac=0.9, val_frac=0.2)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataLoadError):
            generate_synthetic(SyntheticSpec(n_participants=1, duration_s=0.1), blocker / "sub")

    def test_ridge_learnability(self, tmp_path):
        generate_synthetic(SyntheticSpec(), tmp_path)
        test_rmse, std = ridge_learnability(load_features(load_corpus(tmp_path)))
        assert test_rmse < 0.25 * std


def _toy_corpus(n):
    entries = [CorpusEntry(str(i), f"{i}.csv", float(i), "train") for i in range(n)]
    feats = {str(i): MfccMatrix(np.full((3 + i % 2, 2), float(i)), 25.0, 10.0) for i in range(n)}
    return Corpus(CorpusIndex(None, entries), feats)


class TestBatching:
    def test_drop_short(self):
        sizes = [len(y) for _, y in batch_iterator(_toy_corpus(10), "train", 4, seed=0)]
        assert sizes == [4, 4]

    def test_keep_short(self):
        sizes = [len(y) for _, y in batch_iterator(_toy_corpus(10), "train", 4, seed=0, drop_last=False)]
        assert sizes == [4, 4, 2]

    def test_identical_items(self):
        m = MfccMatrix(np.ones((3, 2)), 25.0, 10.0)
        x = pad_batch([m, m], 10)
        assert np.array_equal(x[0], x[1])

    def test_padding(self):
        x = pad_batch([MfccMatrix(np.ones((2, 2)), 25, 10), MfccMatrix(np.ones((4, 2)), 25, 10)], 3)
        assert x.shape == (2, 3, 2) and x[0, 2].tolist() == [0, 0] and x[1].all()

    def test_epoch_keyed_shuffle(self):
        corpus = _toy_corpus(12)
        order = lambda epoch: [y.tolist() for _, y in batch_iterator(corpus, "train", 4, seed=3, epoch=epoch)]
        assert order(1) == order(1)
        assert order(1) != order(2)

    def test_every_item_once(self):
        ys = np.concatenate([y for _, y in batch_iterator(_toy_corpus(12), "train", 4, seed=1)])
        assert sorted(ys.tolist()) == list(range(12))
