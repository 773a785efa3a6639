import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayeseg import io
from bayeseg.data import (
    Boundaries, CrossingBoundaryError, DataError, LabeledSample, SynthConfig, ingest_hcms,
    masks_from_boundaries, normalize, read_boundaries_csv, split_dataset, synth_generate,
    fit_sample, to_arrays, write_boundaries_csv,
)


def fill_oracle(rows, h, w):
    """Label each pixel by walking down its column."""
    mask = np.zeros((h, w), int)
    for col in range(w):
        edges = [math.floor(r[col] + 0.5) for r in rows]
        for row in range(h):
            for k in range(len(edges) - 1):
                if edges[k] <= row < edges[k + 1]:
                    mask[row, col] = k + 1
    return mask


def sample(pid, cohort, idx=0):
    return LabeledSample(np.zeros((1, 2, 2)), np.zeros((2, 2), int), pid, cohort, idx)


class TestMasks:
    def test_flat_pair(self):
        m = masks_from_boundaries(Boundaries([[2.0] * 4, [5.0] * 4]), (8, 4))
        expected = np.zeros((8, 4), int)
        expected[2:5] = 1
        np.testing.assert_array_equal(m, expected)

    def test_coincident_boundaries(self):
        m = masks_from_boundaries(Boundaries([[3, 3, 1], [3, 6, 4]]), (8, 3))
        assert not (m[:, 0] == 1).any()
        assert (m[:, 1] == 1).sum() == 3

    def test_full_height(self):
        m = masks_from_boundaries(Boundaries([[0.0] * 3, [6.0] * 3]), (6, 3))
        assert (m == 1).all()

    def test_round_half_up(self):
        m = masks_from_boundaries(Boundaries([[1.5, 2.49], [3.5, 3.5]]), (6, 2))
        np.testing.assert_array_equal(np.flatnonzero(m[:, 0]), [2, 3])
        np.testing.assert_array_equal(np.flatnonzero(m[:, 1]), [2, 3])

    def test_crossing_names_column(self):
        with pytest.raises(CrossingBoundaryError, match="column 2"):
            masks_from_boundaries(Boundaries([[1, 1, 5], [2, 2, 4]], ["ILM", "RNFL"]), (8, 3))

    def test_column_mismatch(self):
        with pytest.raises(DataError, match="columns"):
            masks_from_boundaries(Boundaries([[1, 2], [3, 4]]), (8, 3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 6), st.integers(4, 12), st.integers(0, 10**6))
    def test_matches_fill_oracle(self, k, w, h, seed):
        rows = np.sort(np.random.default_rng(seed).uniform(0, h, size=(k, w)), axis=0)
        np.testing.assert_array_equal(masks_from_boundaries(Boundaries(rows), (h, w)), fill_oracle(rows, h, w))


class TestNormalize:
    def test_moments(self, rng):
        out = normalize(rng.uniform(size=(32, 17)))
        assert abs(out.mean() - 0.5) <= 1e-9
        assert abs(out.var() - 0.5) <= 1e-9

    def test_idempotent(self, rng):
        once = normalize(rng.normal(size=(9, 9)))
        np.testing.assert_allclose(normalize(once), once, atol=1e-9)

    def test_two_point(self):
        out = normalize(np.array([0.0, 1.0, 0.0, 1.0]))
        np.testing.assert_allclose(out, [0.5 - math.sqrt(0.5), 0.5 + math.sqrt(0.5)] * 2, atol=1e-12)

    def test_constant_warns(self):
        with pytest.warns(UserWarning, match="constant"):
            out = normalize(np.full((3, 3), 0.2))
        np.testing.assert_allclose(out, 0.5)

    @settings(max_examples=40)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30).filter(lambda v: np.ptp(v) > 1e-3))
    def test_moments_property(self, values):
        out = normalize(np.array(values))
        assert abs(out.mean() - 0.5) <= 1e-9
        assert abs(out.var() - 0.5) <= 1e-9


class TestSplit:
    def cohort(self, hc=14, ms=21, slices=49):
        out = []
        for prefix, n in (("HC", hc), ("MS", ms)):
            for p in range(n):
                out.extend(sample(f"{prefix}{p:02d}", prefix, s) for s in range(slices))
        return out

    def test_hcms_cohort_sizes(self):
        train, test = split_dataset(self.cohort(), 0.8, seed=3)
        train_p = {s.patient_id for s in train}
        assert sum(p.startswith("HC") for p in train_p) == 11
        assert sum(p.startswith("MS") for p in train_p) == 17
        assert len(train) == 28 * 49 and len(test) == 7 * 49

    def test_patients_not_split(self):
        train, test = split_dataset(self.cohort(), 0.8, seed=1)
        assert not {s.patient_id for s in train} & {s.patient_id for s in test}

    def test_ratio_one_warns(self):
        with pytest.warns(UserWarning, match="empty test"):
            train, test = split_dataset(self.cohort(2, 2, 1), 1.0)
        assert test == [] and len(train) == 4

    def test_deterministic(self):
        data = self.cohort(5, 6, 2)
        a = split_dataset(data, 0.8, seed=9)
        b = split_dataset(data, 0.8, seed=9)
        assert [s.sample_id for s in a[0]] == [s.sample_id for s in b[0]]

    def test_empty(self):
        with pytest.raises(DataError):
            split_dataset([], 0.8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.floats(0.05, 0.95), st.integers(0, 100))
    def test_counts_property(self, hc, ms, ratio, seed):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train, test = split_dataset(self.cohort(hc, ms, 2), ratio, seed)
        for prefix, n in (("HC", hc), ("MS", ms)):
            got = len({s.patient_id for s in train if s.cohort == prefix})
            assert got == math.floor(n * ratio + 0.5)
        assert len(train) + len(test) == 2 * (hc + ms)


class TestSynth:
    def test_noise_free_intensity_identifies_label(self):
        cfg = SynthConfig(noise_std=0.0)
        levels = [cfg.background_intensity] + list(cfg.layer_intensities)
        for s in synth_generate(cfg, 6):
            np.testing.assert_allclose(s.image[0], np.array(levels)[s.mask])

    def test_all_classes_present(self):
        for s in synth_generate(SynthConfig(), 10):
            assert set(np.unique(s.mask)) == {0, 1, 2, 3}

    def test_same_seed_same_data(self):
        a = synth_generate(SynthConfig(seed=4), 3)
        b = synth_generate(SynthConfig(seed=4), 3)
        c = synth_generate(SynthConfig(seed=5), 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
        assert not np.array_equal(a[0].image, c[0].image)

    def test_sample_independent_of_batch(self):
        whole = synth_generate(SynthConfig(), 5)
        tail = synth_generate(SynthConfig(), 2, start=3)
        np.testing.assert_array_equal(whole[4].image, tail[1].image)

    def test_shadow_attenuation(self):
        base = dict(noise_std=0.0, seed=2)
        clean = synth_generate(SynthConfig(**base), 3)
        shadow = synth_generate(SynthConfig(**base, artifact={"kind": "shadow", "columns": [20, 40],
                                                               "attenuation": 0.2}), 3)
        for c, s in zip(clean, shadow):
            band = s.image[0, :, 20:40].mean() / c.image[0, :, 20:40].mean()
            assert band == pytest.approx(0.2, abs=1e-12)
            np.testing.assert_array_equal(s.image[0, :, :20], c.image[0, :, :20])
            np.testing.assert_array_equal(s.mask, c.mask)

    def test_low_contrast_shrinks_spread(self):
        clean = synth_generate(SynthConfig(noise_std=0.0), 1)[0]
        low = synth_generate(SynthConfig(noise_std=0.0, artifact={"kind": "low_contrast", "gain": 0.3}), 1)[0]
        assert low.image.std() == pytest.approx(0.3 * clean.image.std(), rel=1e-12)

    def test_additive_noise_raises_residual(self):
        cfg = SynthConfig()
        clean = synth_generate(cfg, 1)[0]
        noisy = synth_generate(SynthConfig(artifact={"kind": "additive_noise", "std": 0.3}), 1)[0]
        levels = np.array([cfg.background_intensity] + list(cfg.layer_intensities))
        assert np.std(noisy.image[0] - levels[noisy.mask]) > 2 * np.std(clean.image[0] - levels[clean.mask])

    def test_layer_class_count(self):
        with pytest.raises(ValueError):
            SynthConfig(num_layers=3, layer_intensities=[0.5, 0.5]).validate()
        assert SynthConfig().num_classes == 4

    def test_to_arrays(self):
        imgs, masks = to_arrays(synth_generate(SynthConfig(), 3))
        assert imgs.shape == (3, 1, 64, 64) and masks.shape == (3, 64, 64)
        np.testing.assert_allclose(imgs.mean(axis=(1, 2, 3)), 0.5, atol=1e-9)


def make_fixture(root, crossing=False):
    """Two slices of one patient, stored as PGM and TNSR."""
    pdir = root / "HC001"
    pdir.mkdir(parents=True)
    rows0 = np.array([[1.0, 1.0, 2.0, 2.0, 2.0], [4.0, 4.0, 4.0, 5.0, 5.0], [6.0, 6.0, 6.0, 6.0, 7.0]])
    rows1 = rows0 + 0.6
    if crossing:
        rows1[1, 3] = 9.0
    img = np.arange(40).reshape(8, 5) * 6
    io.write_pgm(pdir / "s000.pgm", img)
    io.save_tnsr(pdir / "s001.tnsr", img / 255.0)
    write_boundaries_csv(pdir / "s000_boundaries.csv", Boundaries(rows0, ["ILM", "INL", "BM"]))
    write_boundaries_csv(pdir / "s001_boundaries.csv", Boundaries(rows1, ["ILM", "INL", "BM"]))
    return rows0, rows1


class TestIngest:
    def test_fixture(self, tmp_path):
        rows0, rows1 = make_fixture(tmp_path)
        samples = ingest_hcms(tmp_path)
        assert len(samples) == 2
        assert {s.cohort for s in samples} == {"HC"}
        np.testing.assert_array_equal(samples[0].mask, fill_oracle(rows0, 8, 5))
        np.testing.assert_array_equal(samples[1].mask, fill_oracle(rows1, 8, 5))
        np.testing.assert_allclose(samples[0].image[0], samples[1].image[0])
        assert samples[0].original_size == (8, 5)

    def test_checked_in_fixture(self):
        root = Path(__file__).parent / "assets" / "hcms_fixture"
        samples = ingest_hcms(root)
        rows0 = np.array([[1.0, 1.0, 2.0, 2.0, 2.0], [4.0, 4.0, 4.0, 5.0, 5.0], [6.0, 6.0, 6.0, 6.0, 7.0]])
        assert [s.sample_id for s in samples] == ["HC001_s000", "HC001_s001"]
        np.testing.assert_array_equal(samples[0].mask, fill_oracle(rows0, 8, 5))
        np.testing.assert_array_equal(samples[1].mask, fill_oracle(rows0 + 0.6, 8, 5))

    def test_fit_to_model_size(self, tmp_path):
        make_fixture(tmp_path)
        s = ingest_hcms(tmp_path)[0]
        fitted = fit_sample(s, (16, 16))
        assert fitted.image.shape == (1, 16, 16) and fitted.mask.shape == (16, 16)
        assert fitted.original_size == (8, 5) and fitted.sample_id == s.sample_id
        assert set(np.unique(fitted.mask)) <= set(np.unique(s.mask))
        assert fit_sample(s, (8, 5)) is s

    def test_crossing_rejected(self, tmp_path):
        make_fixture(tmp_path, crossing=True)
        with pytest.raises(DataError, match="column 3"):
            ingest_hcms(tmp_path)

    def test_empty_directory_lists_layout(self, tmp_path):
        with pytest.raises(DataError, match="expected layout"):
            ingest_hcms(tmp_path)

    def test_missing_boundaries(self, tmp_path):
        make_fixture(tmp_path)
        (tmp_path / "HC001" / "s001_boundaries.csv").unlink()
        with pytest.raises(DataError, match="missing s001_boundaries.csv"):
            ingest_hcms(tmp_path)

    def test_wrong_surface_count(self, tmp_path):
        make_fixture(tmp_path)
        with pytest.raises(DataError, match="expected 4 surfaces"):
            ingest_hcms(tmp_path, num_surfaces=4)

    def test_boundary_csv_round_trip(self, tmp_path):
        b = Boundaries(np.array([[1.25, 2.0], [3.0, 4.5]]), ["ILM", "BM"])
        write_boundaries_csv(tmp_path / "b.csv", b)
        back = read_boundaries_csv(tmp_path / "b.csv")
        assert back.names == ["ILM", "BM"]
        np.testing.assert_array_equal(back.rows, b.rows)
