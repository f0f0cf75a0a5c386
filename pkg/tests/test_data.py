import gzip
import os

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from mapnet.data import (IMAGE_MAGIC, Dataset, batches, gaussian_blobs, idx_header, load_csv_series, load_idx,
                         load_idx_dir, read_idx, series_windows, sine_mix, synth, write_idx, xor_grid)
from mapnet.errors import DataError, FormatError


class TestIdx:
    def test_round_trip_types(self, tmp_path):
        for arr in (np.arange(24, dtype=np.uint8).reshape(2, 3, 4), np.linspace(0, 1, 6).astype(np.float32),
                    np.arange(-3, 3, dtype=np.int16)):
            p = tmp_path / "a.idx"
            write_idx(p, arr)
            out = read_idx(p)
            assert out.dtype == arr.dtype.newbyteorder("=")
            np.testing.assert_array_equal(out, arr)

    def test_gzip(self, tmp_path):
        arr = np.arange(6, dtype=np.uint8)
        write_idx(tmp_path / "a", arr)
        with open(tmp_path / "a", "rb") as fh, gzip.open(tmp_path / "a.gz", "wb") as gz:
            gz.write(fh.read())
        np.testing.assert_array_equal(read_idx(tmp_path / "a.gz"), arr)

    def test_wrong_magic_reports_value(self, tmp_path):
        write_idx(tmp_path / "a", np.zeros(3, dtype=np.uint8))
        with pytest.raises(FormatError, match="2049"):
            read_idx(tmp_path / "a", IMAGE_MAGIC)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "a"
        write_idx(p, np.zeros((4, 5, 5), dtype=np.uint8))
        raw = p.read_bytes()
        p.write_bytes(raw[:-7])
        with pytest.raises(FormatError, match="truncated"):
            read_idx(p)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "x", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "y", np.zeros(4, dtype=np.uint8))
        with pytest.raises(DataError):
            load_idx(tmp_path / "x", tmp_path / "y")

    def test_label_range_checked(self, tmp_path):
        write_idx(tmp_path / "x", np.zeros((2, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "y", np.array([3, 12], dtype=np.uint8))
        with pytest.raises(DataError, match="12"):
            load_idx(tmp_path / "x", tmp_path / "y")

    def test_images_scaled(self, tmp_path):
        write_idx(tmp_path / "x", np.full((2, 3, 3), 255, dtype=np.uint8))
        write_idx(tmp_path / "y", np.array([1, 2], dtype=np.uint8))
        ds = load_idx(tmp_path / "x", tmp_path / "y")
        x, y = ds.split("train")
        assert x.shape == (2, 1, 3, 3) and x.max() == 1.0 and ds.normalized

    def test_reference_mnist_header(self, data_root):
        path = os.path.join(data_root, "mnist", "train-images-idx3-ubyte")
        if not os.path.exists(path):
            pytest.skip(f"reference file not present at {path}")
        assert idx_header(path) == (2051, (60000, 28, 28))

    def test_reference_mnist_labels(self, data_root):
        root = os.path.join(data_root, "mnist")
        if not os.path.isdir(root):
            pytest.skip(f"reference files not present at {root}")
        ds = load_idx_dir(root)
        for split in ("train", "test"):
            _, y = ds.split(split)
            assert y.min() >= 0 and y.max() <= 9
        assert len(ds.split("train")[0]) == 60000 and len(ds.split("test")[0]) == 10000


class TestSeries:
    def test_window_count(self):
        ds = series_windows(np.arange(10.0), np.arange(10.0), window=3, horizon=1, train_frac=1.0)
        assert ds.meta["n_samples"] == 6

    def test_target_alignment(self):
        v = np.arange(10.0)
        ds = series_windows(v, v, window=3, horizon=1, train_frac=0.5)
        x, y = ds.split("train")
        lo, hi = ds.meta["y_min"], ds.meta["y_max"]
        raw_x = x[:, :, 0] * (hi - lo) + lo
        raw_y = y[:, 0] * (hi - lo) + lo
        np.testing.assert_allclose(raw_x[0], [0, 1, 2], atol=1e-6)
        assert raw_y[0] == pytest.approx(4.0)

    def test_constant_series(self):
        ds = series_windows(np.full(30, 7.0), np.full(30, 7.0), window=5)
        for split in ("train", "test"):
            x, y = ds.split(split)
            assert not x.any()
            assert float(np.mean((y - y.mean()) ** 2)) == 0.0

    def test_csv(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("t,a,b\n" + "\n".join(f"{i},{i * 2},{i % 3}" for i in range(40)) + "\n")
        ds = load_csv_series(p, ["a", "b"], "a", window=4, horizon=0)
        x, _ = ds.split("train")
        assert x.shape[1:] == (4, 2)

    def test_csv_bad_cell(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("a,b\n1,2\n3,x\n5,6\n")
        with pytest.raises(DataError, match=r"row 3.*'b'"):
            load_csv_series(p, ["a", "b"], "a", window=1)

    def test_normalisation_fit_on_train_rows(self):
        v = np.concatenate([np.linspace(0, 1, 190), np.full(10, 5.0)])
        ds = series_windows(v, v, window=5, horizon=0)
        assert ds.meta["y_max"] < 5.0


class TestSynth:
    def test_blobs_linearly_separable(self):
        ds = gaussian_blobs(n=600, separation=10.0, seed=0)
        x, y = ds.split("train")
        xt, yt = ds.split("test")
        clf = LogisticRegression().fit(x, y)
        assert clf.score(x, y) == 1.0 and clf.score(xt, yt) == 1.0

    @pytest.mark.parametrize("kind", ["gaussian_blobs", "sine_mix", "xor_grid"])
    def test_seeded_bytes(self, kind):
        a, b = synth(kind, seed=3), synth(kind, seed=3)
        for split in ("train", "test"):
            assert a.split(split)[0].tobytes() == b.split(split)[0].tobytes()
            assert a.split(split)[1].tobytes() == b.split(split)[1].tobytes()

    def test_xor_grid_best_linear_split(self):
        ds = xor_grid(n=2000, cells=8, seed=0)
        x, y = ds.split("train")
        best = 0.0
        for theta in np.linspace(0, np.pi, 360, endpoint=False):
            proj = x @ np.array([np.cos(theta), np.sin(theta)])
            order = np.argsort(proj)
            ys = y[order]
            # label 1 above the threshold: correct = zeros below + ones above
            zeros_below = np.concatenate([[0], np.cumsum(ys == 0)])
            ones_above = np.concatenate([np.cumsum((ys == 1)[::-1])[::-1], [0]])
            acc = (zeros_below + ones_above).max() / len(y)
            best = max(best, acc, 1 - (zeros_below + ones_above).min() / len(y))
        assert best <= 0.60

    def test_sine_mix_is_regression(self):
        ds = sine_mix(length=300, window=10)
        assert ds.task == "regression"
        assert ds.split("train")[1].shape[1] == 1

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            synth("spirals")


class TestBatches:
    def _ds(self, n=23):
        return Dataset({"train": (np.arange(n, dtype=np.float32)[:, None], np.arange(n))})

    def test_seeded_order(self):
        a = [y.tolist() for _, y in batches(self._ds(), "train", 5, seed=1, epoch=2)]
        b = [y.tolist() for _, y in batches(self._ds(), "train", 5, seed=1, epoch=2)]
        c = [y.tolist() for _, y in batches(self._ds(), "train", 5, seed=1, epoch=3)]
        assert a == b and a != c

    def test_each_row_once(self):
        seen = np.concatenate([y for _, y in batches(self._ds(), "train", 5, seed=0)])
        assert sorted(seen.tolist()) == list(range(23))

    def test_large_batch(self):
        assert len(list(batches(self._ds(), "train", 100, seed=0))) == 1

    def test_missing_split(self):
        with pytest.raises(DataError):
            list(batches(self._ds(), "test", 5))

    def test_subset_and_filter(self):
        ds = Dataset({"train": (np.zeros((10, 1)), np.arange(10) % 5)})
        f = ds.filter_classes([3, 4])
        assert sorted(set(f.split("train")[1].tolist())) == [0, 1]
        assert len(ds.subset("train", 4, seed=0).split("train")[0]) == 4
