import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedfusion import numcore as nc
from sharedfusion.data import (
    DATASET_MAGIC,
    PairedDataset,
    SyntheticSpec,
    dataset_bytes,
    dataset_digest,
    expected_file_size,
    generate,
    load_dataset,
    load_manifest,
    low_frequency_pattern,
    parse_ratio,
    save_dataset,
    split,
)
from sharedfusion.errors import ConfigError, CorruptionError, DataError, FormatError
from sharedfusion.metrics import auc_binary

SMALL = SyntheticSpec(n_samples=3, image_size=4, tasks=(2, 3), seed=9)


def probe_auc(images, labels, splits, lam=1e3):
    """Ridge-regression linear probe (dual form), mean binary test AUC over tasks."""
    x = images.reshape(len(images), -1)
    tr, te = np.asarray(splits.train), np.asarray(splits.test)
    mu = x[tr].mean(axis=0)
    a = x[tr] - mu
    gram = a @ a.T + lam * np.eye(len(tr))
    aucs = []
    for t in range(labels.shape[1]):
        w = a.T @ np.linalg.solve(gram, np.where(labels[tr, t] == 1, 1.0, -1.0))
        aucs.append(auc_binary((x[te] - mu) @ w, labels[te, t] == 1))
    return float(np.mean(aucs))


class TestSpec:
    def test_prior_enforced(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(snr_derm=1.0, snr_clinical=1.0)
        SyntheticSpec(snr_derm=1.0, snr_clinical=2.0, enforce_prior=False)

    @pytest.mark.parametrize("kwargs", [{"n_samples": 0}, {"tasks": (2, 1)}, {"tasks": ()}, {"nuisance_strength": -1}])
    def test_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticSpec(**kwargs)


class TestGenerate:
    def test_deterministic_bytes(self):
        assert dataset_bytes(generate(SMALL)) == dataset_bytes(generate(SMALL))

    def test_seed_changes_data(self):
        other = SyntheticSpec(**{**SMALL.to_dict(), "seed": 10})
        assert dataset_digest(generate(SMALL)) != dataset_digest(generate(other))

    def test_prefix_stable(self):
        # per-sample seeds make sample i independent of n_samples
        longer = generate(SyntheticSpec(**{**SMALL.to_dict(), "n_samples": 5}))
        short = generate(SMALL)
        assert np.array_equal(longer.derm[:3], short.derm)

    def test_shapes_and_labels(self):
        ds = generate(SMALL)
        assert ds.clinical.shape == ds.derm.shape == (3, 3, 4, 4)
        assert ds.labels.shape == (3, 2)
        assert ds.labels[:, 1].max() < 3

    def test_pattern_normalized(self, rng):
        p = low_frequency_pattern(rng, 3, 16)
        assert abs(p.mean()) < 1e-12
        assert np.mean(p**2) == pytest.approx(1.0, rel=1e-12)

    def test_symmetric_modalities(self):
        spec = SyntheticSpec(n_samples=400, image_size=6, snr_derm=2.0, snr_clinical=2.0, nuisance_strength=0.0, enforce_prior=False, seed=4)
        ds = generate(spec)
        diff = ds.derm - ds.clinical
        # same template, independent unit noise in each image
        assert abs(diff.mean()) < 0.02
        assert diff.var() == pytest.approx(2.0, rel=0.03)
        assert ds.derm.var() == pytest.approx(ds.clinical.var(), rel=0.03)

    @pytest.mark.slow
    def test_linear_probe_prefers_dermoscopy(self):
        gaps = []
        for seed in range(5):
            ds = generate(SyntheticSpec(seed=seed))
            sp = split(len(ds), seed=seed)
            gaps.append(probe_auc(ds.derm, ds.labels, sp) - probe_auc(ds.clinical, ds.labels, sp))
        assert np.mean(gaps) > 0.05


class TestSplit:
    def test_small_sizes(self):
        assert split(10).sizes() == (7, 1, 2)

    def test_floor_rule(self):
        # floor(290 * 0.1) = 29 and floor(290 * 0.2) = 58, remainder 203 to train
        assert split(290).sizes() == (203, 29, 58)

    def test_same_seed(self):
        assert split(50, seed=3) == split(50, seed=3)
        assert split(50, seed=3) != split(50, seed=4)

    @given(st.integers(3, 500), st.integers(1, 8), st.integers(0, 8), st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_disjoint_and_covering(self, n, a, b, seed):
        total = a + b + 2
        sp = split(n, (a / total, b / total, 2 / total), seed)
        union = sp.train + sp.val + sp.test
        assert sorted(union) == list(range(n))

    def test_fraction_ratios(self):
        assert split(1100, tuple(parse_ratio(r) for r in ("8/11", "1/11", "2/11"))).sizes() == (800, 100, 200)

    def test_errors(self):
        with pytest.raises(ConfigError):
            split(10, (0.5, 0.5, 0.5))
        with pytest.raises(DataError):
            split(2)


class TestContainer:
    def test_round_trip(self, tmp_path):
        ds = generate(SMALL)
        digest = save_dataset(ds, tmp_path / "d.pemd")
        back = load_dataset(tmp_path / "d.pemd")
        assert back.equals(ds)
        assert digest == dataset_digest(back)

    def test_file_size(self, tmp_path):
        ds = generate(SMALL)
        save_dataset(ds, tmp_path / "d.pemd")
        spec_len = len(json.dumps(SMALL.to_dict(), sort_keys=True).encode())
        tensor = 4 + 4 + 4 * 3 + 8 * 3 * 4 * 4  # magic, rank, dims, values
        expected = 4 + 4 + 4 + spec_len + 4 + 4 + 3 * (4 * 2 + 2 * tensor)
        assert (tmp_path / "d.pemd").stat().st_size == expected == expected_file_size(ds)

    def test_bad_magic(self, tmp_path):
        raw = bytearray(dataset_bytes(generate(SMALL)))
        raw[:4] = b"NOPE"
        (tmp_path / "d.pemd").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d.pemd")

    @pytest.mark.parametrize("cut", [6, 40, -1])
    def test_truncated(self, tmp_path, cut):
        raw = dataset_bytes(generate(SMALL))
        assert raw[:4] == DATASET_MAGIC
        (tmp_path / "d.pemd").write_bytes(raw[:cut])
        with pytest.raises(CorruptionError):
            load_dataset(tmp_path / "d.pemd")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "d.pemd").write_bytes(dataset_bytes(generate(SMALL)) + b"\0")
        with pytest.raises(CorruptionError):
            load_dataset(tmp_path / "d.pemd")


class TestManifest:
    def _write_images(self, root, ds):
        rows = ["sample_id,clinical_path,derm_path,label_1,label_2"]
        for i in range(len(ds)):
            for name, arr in (("c", ds.clinical[i]), ("d", ds.derm[i])):
                with open(root / f"{name}{i}.pemt", "wb") as fp:
                    nc.write_tensor(fp, arr)
            rows.append(f"s{i},c{i}.pemt,d{i}.pemt,{ds.labels[i, 0]},{ds.labels[i, 1]}")
        return rows

    def test_loads_relative_paths(self, tmp_path):
        ds = generate(SMALL)
        (tmp_path / "m.csv").write_text("\n".join(self._write_images(tmp_path, ds)) + "\n")
        back = load_manifest(tmp_path / "m.csv")
        assert back.equals(PairedDataset(ds.labels, ds.clinical, ds.derm))

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,a,b\n")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "m.csv")

    def test_ragged_row_names_line(self, tmp_path):
        ds = generate(SMALL)
        rows = self._write_images(tmp_path, ds)
        rows[2] = rows[2].rsplit(",", 1)[0]
        (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
        with pytest.raises(DataError, match="line 3"):
            load_manifest(tmp_path / "m.csv")
