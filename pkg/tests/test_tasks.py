import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srae.data import Dataset, SynthSpec, generate_synthetic
from srae.diffcore import ShapeError
from srae.model import SraeHyper, decode, encode, init_params
from srae.tasks import (
    EncodingRecord,
    encode_dataset,
    export_encodings,
    fit_domain_classifier,
    fit_logistic,
    mean_codes,
    montage,
    nn_search,
    rank_by_distance,
    read_encodings,
    reconstruct,
    reconstruction_montage,
    stratified_split,
    translate,
)
from srae.training import Checkpoint

from .conftest import SMALL


@pytest.fixture(scope="module")
def ckpt():
    return Checkpoint(SMALL, "two-disc", init_params(SMALL, "two-disc", 6))


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(12,) + SMALL.image_shape).astype(np.float32)


def brute_force_ranking(query, pool, k):
    """Independent scan: python floats, explicit loop, sort on (distance, index)."""
    scored = []
    for i, row in enumerate(pool):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(row, query)) ** 0.5
        scored.append((d, i))
    scored.sort()
    return [(i, d) for d, i in scored[:k]]


class TestTranslate:
    def test_identity_swap_bitwise(self, ckpt, images):
        for x in images[:4]:
            out = translate(ckpt, x, x)
            lat = encode(ckpt.params, SMALL, x)
            expected = decode(ckpt.params, SMALL, lat.mu_c, lat.z_d)
            assert out.tobytes() == expected.tobytes()
            assert out.tobytes() == reconstruct(ckpt, x).tobytes()

    def test_shape_and_range(self, ckpt, images):
        out = translate(ckpt, images[:3], images[3:6])
        assert out.shape == (3,) + SMALL.image_shape
        assert out.min() >= 0 and out.max() <= 1

    def test_content_from_source_style_from_target(self, ckpt, images):
        # the output depends on x_style only through its domain code
        a = translate(ckpt, images[0], images[1])
        swapped = images[1][::-1].copy()
        lat1, lat2 = encode(ckpt.params, SMALL, images[1]), encode(ckpt.params, SMALL, swapped)
        if np.array_equal(lat1.mu_d_vec, lat2.mu_d_vec):
            assert np.array_equal(a, translate(ckpt, images[0], swapped))
        src = encode(ckpt.params, SMALL, images[0])
        assert np.array_equal(a, decode(ckpt.params, SMALL, src.mu_c, lat1.z_d))

    def test_shape_mismatch(self, ckpt, images):
        with pytest.raises(ShapeError):
            translate(ckpt, images[0], np.zeros((4, 4, 1)))
        with pytest.raises(ShapeError):
            translate(ckpt, images[:2], images[:3])


class TestRanking:
    @pytest.mark.parametrize("seed", range(50))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pool = rng.standard_normal((50, 12))
        # inject exact duplicates so tie-breaking is exercised
        pool[rng.integers(50, size=5)] = pool[rng.integers(50, size=5)]
        query = rng.standard_normal(12) if seed % 2 else pool[seed % 50]
        k = int(rng.integers(0, 51))
        got = rank_by_distance(query, pool, k)
        want = brute_force_ranking(query, pool, k)
        assert [i for i, _ in got] == [i for i, _ in want]
        np.testing.assert_allclose([d for _, d in got], [d for _, d in want], rtol=1e-12, atol=1e-12)

    def test_ties_prefer_smaller_index(self):
        pool = np.array([[1.0], [-1.0], [1.0], [0.0]])
        assert [i for i, _ in rank_by_distance(np.zeros(1), pool, 4)] == [3, 0, 1, 2]

    def test_k_zero(self):
        assert rank_by_distance(np.zeros(2), np.ones((3, 2)), 0) == []

    @pytest.mark.parametrize("k", [-1, 4])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            rank_by_distance(np.zeros(2), np.ones((3, 2)), k)

    def test_cosine(self):
        pool = np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        ranked = rank_by_distance(np.array([1.0, 0.0]), pool, 3, metric="cosine")
        assert [i for i, _ in ranked] == [0, 1, 2]
        assert ranked[0][1] == pytest.approx(0.0)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            rank_by_distance(np.zeros(2), np.ones((3, 2)), 1, metric="manhattan")


class TestNnSearch:
    def test_exact_copy_is_first(self, ckpt, images):
        cands = Dataset(images, np.arange(12) % 2, m=2)
        ranked = nn_search(ckpt, images[7], cands, 3)
        assert ranked[0] == (7, 0.0)

    def test_matches_oracle(self, ckpt, images):
        cands = Dataset(images, np.arange(12) % 2, m=2)
        target = np.random.default_rng(9).uniform(size=SMALL.image_shape)
        pool, _ = mean_codes(ckpt, images)
        q, _ = mean_codes(ckpt, target)
        got = nn_search(ckpt, target, cands, 12)
        want = brute_force_ranking(q[0], pool, 12)
        assert [i for i, _ in got] == [i for i, _ in want]

    def test_k_bounds(self, ckpt, images):
        cands = Dataset(images, np.arange(12) % 2, m=2)
        assert nn_search(ckpt, images[0], cands, 0) == []
        with pytest.raises(ValueError):
            nn_search(ckpt, images[0], cands, 13)


class TestClassifier:
    def test_separable(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-1, 0.1, 50), rng.normal(1, 0.1, 50)])
        records = [EncodingRecord(i, int(i >= 50), np.zeros(2), np.array([v])) for i, v in enumerate(x)]
        _, train_acc, test_acc = fit_domain_classifier(records, "mu_d", 0)
        assert train_acc == 1.0 and test_acc == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((200, 4))
        accs = []
        for seed in range(20):
            labels = np.random.default_rng(seed).permutation(np.arange(200) % 2)
            records = [EncodingRecord(i, int(d), f, f[:2]) for i, (f, d) in enumerate(zip(feats, labels))]
            accs.append(fit_domain_classifier(records, "mu_c", seed)[2])
        assert 0.35 <= np.mean(accs) <= 0.65
        assert all(0.35 <= a <= 0.65 for a in accs), accs

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        records = [EncodingRecord(i, i % 2, rng.standard_normal(3), rng.standard_normal(2)) for i in range(40)]
        a = fit_domain_classifier(records, "mu_c", 5)
        b = fit_domain_classifier(records, "mu_c", 5)
        assert a[1:] == b[1:]
        np.testing.assert_array_equal(a[0].weights, b[0].weights)

    def test_single_class(self):
        records = [EncodingRecord(i, 0, np.zeros(1), np.zeros(1)) for i in range(5)]
        with pytest.raises(ValueError):
            fit_domain_classifier(records)

    def test_bad_field(self):
        records = [EncodingRecord(i, i % 2, np.zeros(1), np.zeros(1)) for i in range(6)]
        with pytest.raises(ValueError):
            fit_domain_classifier(records, "z")

    def test_converges_on_three_classes(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0, 3], [3, 0], [-3, -3]])
        y = np.repeat(np.arange(3), 40)
        x = centers[y] + rng.normal(0, 0.5, (120, 2))
        clf = fit_logistic(x, y, 3)
        assert clf.accuracy(x, y) > 0.97

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(2, 30), min_size=2, max_size=4), st.integers(0, 1000))
    def test_split_stratified(self, counts, seed):
        labels = np.repeat(np.arange(len(counts)), counts)
        tr, te = stratified_split(labels, seed)
        assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == len(labels)
        for d, c in enumerate(counts):
            n_tr = np.sum(labels[tr] == d)
            assert 1 <= n_tr <= c - 1
            assert abs(n_tr - 0.8 * c) <= 1


@pytest.fixture(scope="module")
def default_setup():
    hyper = SraeHyper()
    ds = generate_synthetic(SynthSpec(counts=(10, 10), seed=4))
    return Checkpoint(hyper, "one-disc", init_params(hyper, "one-disc", 1)), ds


class TestExport:
    def test_shape(self, default_setup, tmp_path):
        ckpt, ds = default_setup
        export_encodings(ckpt, ds, tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert len(lines) == 21 and len(header) == 2 + 128 + 4
        assert header[:3] == ["id", "domain", "zc_0"] and header[-1] == "zd_3"
        assert all(len(line.split(",")) == 134 for line in lines[1:])

    def test_byte_identical(self, default_setup, tmp_path):
        ckpt, ds = default_setup
        export_encodings(ckpt, ds, tmp_path / "a.csv")
        export_encodings(ckpt, ds, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_round_trip(self, default_setup, tmp_path):
        ckpt, ds = default_setup
        export_encodings(ckpt, ds, tmp_path / "e.csv")
        back = read_encodings(tmp_path / "e.csv")
        fresh = encode_dataset(ckpt, ds)
        for r, f in zip(back, fresh):
            assert (r.id, r.domain) == (f.id, f.domain)
            # nine significant digits recover float32 exactly
            assert r.mu_c.astype(np.float32).tobytes() == f.mu_c.tobytes()
            assert r.mu_d.astype(np.float32).tobytes() == f.mu_d.tobytes()

    def test_unwritable(self, default_setup, tmp_path):
        ckpt, ds = default_setup
        with pytest.raises(OSError):
            export_encodings(ckpt, ds, tmp_path / "missing" / "e.csv")


class TestMontage:
    def test_layout(self, ckpt, images):
        out = reconstruction_montage(ckpt, images[:5], per_row=4)
        # rows: truth(4), recon(4), truth(1), recon(1)
        assert out.shape == (4 * 9 + 1, 4 * 9 + 1, 1)
        np.testing.assert_array_equal(out[1:9, 1:9], images[0])
        np.testing.assert_array_equal(out[10:18, 1:9], reconstruct(ckpt, images[:5])[0])

    def test_padding_fill(self):
        out = montage([np.zeros((2, 3, 3, 1))], pad=1, fill=0.5)
        assert out.shape == (5, 9, 1)
        assert out[0].min() == 0.5
