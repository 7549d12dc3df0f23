import numpy as np
import pytest

from prunekit.dataset import (
    BlobSpec,
    Dataset,
    DatasetError,
    bilinear_weights,
    blob_centers,
    class_histogram,
    generate_blobs,
    load_csv,
    load_ytf,
    multiformation_decode,
    read_ytf,
    split,
    write_csv,
    write_ytf,
    write_ytl,
)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestCsv:
    def test_basic_read(self, tmp_path):
        p = _write(tmp_path, "a,b,label\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n")
        d = load_csv(p, "label")
        assert (d.n, d.dim, d.num_classes) == (4, 2, 2)
        np.testing.assert_array_equal(d.features[:, 1], [2, 4, 6, 8])
        np.testing.assert_array_equal(d.labels, [0, 1, 0, 1])

    def test_labels_remapped_in_sorted_order(self, tmp_path):
        p = _write(tmp_path, "x,y\n0.5,7\n1.5,3\n2.5,7\n")
        d = load_csv(p, "y")
        assert d.meta["label_map"] == {3: 0, 7: 1}
        np.testing.assert_array_equal(d.labels, [1, 0, 1])

    def test_label_column_by_index(self, tmp_path):
        p = _write(tmp_path, "y,x\n1,0.1\n2,0.2\n")
        d = load_csv(p, 0)
        np.testing.assert_array_equal(d.labels, [0, 1])
        np.testing.assert_allclose(d.features[:, 0], [0.1, 0.2])

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        p = _write(tmp_path, "a,b,label\n1,2,0\n3,NA,1\n")
        with pytest.raises(DatasetError, match=r"row 3.*column 'b'"):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_empty_file(self, tmp_path):
        with pytest.raises(DatasetError, match="empty"):
            load_csv(_write(tmp_path, ""))

    def test_single_class(self, tmp_path):
        with pytest.raises(DatasetError, match="one class"):
            load_csv(_write(tmp_path, "a,label\n1,4\n2,4\n"))

    def test_round_trip(self, tmp_path, rng):
        d = Dataset(rng.standard_normal((30, 5)) * 1e3, rng.integers(0, 3, 30), 3)
        d.labels[:3] = [0, 1, 2]
        p = tmp_path / "rt.csv"
        write_csv(d, p)
        back = load_csv(p)
        np.testing.assert_allclose(back.features, d.features, rtol=1e-6)
        np.testing.assert_array_equal(back.labels, d.labels)


class TestBlobs:
    def test_counts(self):
        d = generate_blobs(BlobSpec(2, 10, 2, 5.0, 1.0, 0.0), seed=1)
        assert d.n == 20
        np.testing.assert_array_equal(class_histogram(d), [10, 10])

    def test_label_noise_count_is_rounded_rate(self):
        d = generate_blobs(BlobSpec(2, 10, 2, 5.0, 1.0, 0.1), seed=1)
        changed = np.flatnonzero(d.labels != d.meta["clean_labels"])
        assert changed.size == 2
        np.testing.assert_array_equal(changed, d.meta["flipped"])

    def test_flips_never_keep_the_original_class(self):
        d = generate_blobs(BlobSpec(5, 40, 3, 5.0, 1.0, 0.3), seed=4)
        f = d.meta["flipped"]
        assert f.size == 60
        assert np.all(d.labels[f] != d.meta["clean_labels"][f])

    def test_deterministic(self):
        spec = BlobSpec(2, 10, 2, 5.0, 1.0, 0.1)
        a, b = generate_blobs(spec, 1), generate_blobs(spec, 1)
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert generate_blobs(spec, 2).features.tobytes() != a.features.tobytes()

    def test_centers_along_axes(self):
        c = blob_centers(BlobSpec(3, 1, 4, 2.5, 1.0))
        np.testing.assert_array_equal(c, [[2.5, 0, 0, 0], [0, 2.5, 0, 0], [0, 0, 2.5, 0]])

    def test_centers_distinct_when_classes_exceed_dims(self):
        c = blob_centers(BlobSpec(7, 1, 2, 1.0, 1.0))
        assert len({tuple(r) for r in c}) == 7

    def test_well_separated_blobs_nearest_centroid(self):
        spec = BlobSpec(4, 200, 6, 10.0, 1.0, 0.0)
        d = generate_blobs(spec, 3)
        means = np.stack([d.features[d.labels == k].mean(axis=0) for k in range(4)])
        pred = np.argmin(((d.features[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == d.labels) >= 0.99

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(center_separation=0.0),
            dict(noise_std=-1.0),
            dict(label_noise_rate=1.0),
            dict(num_classes=1),
        ],
    )
    def test_spec_validation(self, kwargs):
        base = dict(num_classes=2, samples_per_class=3, dim=2, center_separation=1.0, noise_std=1.0)
        base.update(kwargs)
        with pytest.raises(DatasetError):
            BlobSpec(**base)


class TestMultiformation:
    def _image_ds(self, n=1, shape=(1, 4, 4), labels=None):
        d = int(np.prod(shape))
        x = np.arange(n * d, dtype=np.float64).reshape(n, d)
        y = labels if labels is not None else np.arange(n) % 2
        return Dataset(x, y, 2, shape)

    def test_identity_factor(self):
        d = self._image_ds(3)
        out = multiformation_decode(d, 1)
        np.testing.assert_array_equal(out.features, d.features)
        np.testing.assert_array_equal(out.labels, d.labels)

    def test_bilinear_stencil_2_to_4(self):
        np.testing.assert_allclose(
            bilinear_weights(2, 4), [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]]
        )

    def test_top_left_patch_hand_computed(self):
        # image values 0..15 row-major; top-left 2x2 patch is [[0, 1], [4, 5]]
        out = multiformation_decode(self._image_ds(1), 2)
        assert out.n == 4
        expected = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [1.0, 1.25, 1.75, 2.0],
                [3.0, 3.25, 3.75, 4.0],
                [4.0, 4.25, 4.75, 5.0],
            ]
        )
        np.testing.assert_allclose(out.features[0].reshape(4, 4), expected, atol=1e-12)
        # bottom-right patch [[10, 11], [14, 15]] is the same stencil shifted by 10
        np.testing.assert_allclose(out.features[3].reshape(4, 4), expected + 10, atol=1e-12)

    def test_provenance_and_order(self):
        out = multiformation_decode(self._image_ds(2, (2, 4, 6)), 2)
        np.testing.assert_array_equal(out.meta["source_index"], [0, 0, 0, 0, 1, 1, 1, 1])
        np.testing.assert_array_equal(out.meta["patch_position"][:4], [[0, 0], [0, 1], [1, 0], [1, 1]])
        np.testing.assert_array_equal(out.labels, [0, 0, 0, 0, 1, 1, 1, 1])

    def test_counts_scale_by_factor_squared(self):
        d = self._image_ds(10, (3, 4, 4))
        out = multiformation_decode(d, 2)
        assert out.n == 40
        np.testing.assert_array_equal(class_histogram(out), 4 * class_histogram(d))

    def test_matches_torch_interpolate(self, rng):
        torch = pytest.importorskip("torch")
        x = rng.standard_normal((2, 3 * 6 * 9))
        d = Dataset(x, [0, 1], 2, (3, 6, 9))
        out = multiformation_decode(d, 3)
        imgs = torch.from_numpy(x.reshape(2, 3, 6, 9))
        patch = imgs[1:2, :, 2:4, 3:6]  # source 1, patch (row 1, col 1)
        ref = torch.nn.functional.interpolate(patch, size=(6, 9), mode="bilinear", align_corners=False)
        np.testing.assert_allclose(out.features[9 + 4].reshape(3, 6, 9), ref[0].numpy(), atol=1e-12)

    def test_errors(self):
        with pytest.raises(DatasetError, match="image_shape"):
            multiformation_decode(Dataset(np.zeros((2, 4)), [0, 1], 2), 2)
        with pytest.raises(DatasetError, match="divisible"):
            multiformation_decode(self._image_ds(1, (1, 4, 6)), 4)


class TestSplit:
    def _balanced(self, n_per=50):
        x = np.arange(2 * n_per, dtype=float)[:, None]
        return Dataset(x, np.repeat([0, 1], n_per), 2)

    def test_stratified_counts(self):
        sp = split(self._balanced(), 0.2, seed=0)
        np.testing.assert_array_equal(class_histogram(sp.test), [10, 10])
        np.testing.assert_array_equal(class_histogram(sp.train), [40, 40])

    def test_disjoint_and_covering(self):
        sp = split(self._balanced(), 0.3, seed=5)
        a = set(sp.train.features[:, 0]) | set(sp.test.features[:, 0])
        assert len(a) == 100 and not set(sp.train.features[:, 0]) & set(sp.test.features[:, 0])

    def test_deterministic(self):
        a = split(self._balanced(), 0.2, 9)
        b = split(self._balanced(), 0.2, 9)
        np.testing.assert_array_equal(a.test.features, b.test.features)

    def test_tiny_class_error(self):
        d = Dataset(np.zeros((5, 1)), [0, 0, 0, 0, 1], 2)
        with pytest.raises(DatasetError, match="class 1"):
            split(d, 0.5, 0)


class TestHistogram:
    def test_balanced(self):
        d = generate_blobs(BlobSpec(2, 10, 2, 5.0, 1.0), 0)
        np.testing.assert_array_equal(class_histogram(d), [10, 10])

    def test_absent_class_reports_zero(self):
        d = Dataset(np.zeros((5, 1)), [0, 0, 2, 2, 2], 3)
        np.testing.assert_array_equal(class_histogram(d), [2, 0, 3])
        assert class_histogram(d).sum() == d.n


class TestYtf:
    def test_round_trip_rank4(self, tmp_path, rng):
        x = rng.standard_normal((5, 3, 4, 4)).astype(np.float32)
        write_ytf(x, tmp_path / "x.ytf")
        write_ytl(np.array([0, 1, 2, 1, 0]), tmp_path / "y.ytl")
        raw = (tmp_path / "x.ytf").read_bytes()
        assert raw[:4] == b"YTF1" and raw[4] == 1 and raw[5] == 4
        assert len(raw) == 6 + 4 * 4 + 4 * x.size
        np.testing.assert_array_equal(read_ytf(tmp_path / "x.ytf"), x)
        d = load_ytf(tmp_path / "x.ytf", tmp_path / "y.ytl")
        assert d.image_shape == (3, 4, 4) and d.num_classes == 3

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ytf").write_bytes(b"NOPE\x01\x02")
        with pytest.raises(DatasetError, match="magic"):
            read_ytf(tmp_path / "x.ytf")


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 4)), [0, 1], 2, image_shape=(1, 3, 1))
