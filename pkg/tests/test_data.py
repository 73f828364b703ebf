"""Generators are pure functions of spec + seed; ingestion is strict and
lossless."""

import hashlib

import numpy as np
import pytest

from crosstask import data as dt
from crosstask.errors import ConfigError, IngestionError
from crosstask.evaluate import auroc


def _imbalanced_spec(**over):
    base = dict(num_tasks=3, num_features=8,
                samples_per_task=(60, 40, 20), timesteps=1,
                latent_dim=4, seed=11)
    base.update(over)
    return dt.SyntheticSpec(**base)


def _temporal_spec(**over):
    base = dict(num_tasks=2, num_features=6, samples_per_task=(80, 80),
                timesteps=8, relations=(dt.TransferRelation(0, 1, 2),),
                seed=21, channel_noise=0.3)
    base.update(over)
    return dt.SyntheticSpec(**base)


def _split_digest(split):
    digest = hashlib.sha256()
    for batch in split.batches().values():
        digest.update(batch.inputs.tobytes())
        digest.update(batch.labels.tobytes())
        digest.update(batch.label_mask.tobytes())
        digest.update(batch.timestep_counts.tobytes())
    return digest.hexdigest()


class TestImbalancedGenerator:
    def test_noiseless_bayes_auroc_is_one(self):
        split = dt.generate_imbalanced_tasks(_imbalanced_spec())
        for name, batch in split.batches().items():
            bayes = split.info["bayes_scores"][name]
            for d in range(batch.num_tasks):
                rows = batch.label_mask[:, d]
                if batch.labels[rows, d].min() == batch.labels[rows, d].max():
                    continue
                assert auroc(bayes[rows, d], batch.labels[rows, d]) == 1.0

    def test_paper_protocol_counts_exact(self):
        spec = _imbalanced_spec(num_tasks=5,
                                samples_per_task=(5000, 5000, 1000, 1000, 500),
                                num_features=12)
        split = dt.generate_imbalanced_tasks(spec)
        counted = np.zeros(5, dtype=int)
        for batch in split.batches().values():
            counted += batch.label_mask.sum(axis=0)
        np.testing.assert_array_equal(counted, [5000, 5000, 1000, 1000, 500])

    def test_one_label_per_instance(self):
        split = dt.generate_imbalanced_tasks(_imbalanced_spec())
        for batch in split.batches().values():
            np.testing.assert_array_equal(batch.label_mask.sum(axis=1), 1)

    def test_identical_seed_byte_identical(self):
        a = dt.generate_imbalanced_tasks(_imbalanced_spec())
        b = dt.generate_imbalanced_tasks(_imbalanced_spec())
        assert _split_digest(a) == _split_digest(b)
        c = dt.generate_imbalanced_tasks(_imbalanced_spec(seed=12))
        assert _split_digest(a) != _split_digest(c)

    def test_label_noise_rate_applied(self):
        spec = _imbalanced_spec(samples_per_task=(4000, 50, 50),
                                label_noise=(0.25, 0.0, 0.0))
        split = dt.generate_imbalanced_tasks(spec)
        disagreements = 0
        labeled = 0
        for name, batch in split.batches().items():
            bayes = split.info["bayes_scores"][name]
            rows = batch.label_mask[:, 0]
            clean = (bayes[rows, 0] > np.median(bayes[rows, 0])).astype(float)
            disagreements += np.sum(clean != batch.labels[rows, 0])
            labeled += rows.sum()
        assert abs(disagreements / labeled - 0.25) < 0.05

    def test_temporal_spec_rejected(self):
        with pytest.raises(ConfigError):
            dt.generate_imbalanced_tasks(_imbalanced_spec(timesteps=3))

    def test_infeasible_spec(self):
        with pytest.raises(ConfigError):
            _imbalanced_spec(samples_per_task=(10, 0, 10))


class TestTemporalGenerator:
    def test_ground_truth_direction_recorded(self):
        split = dt.generate_temporal_tasks(_temporal_spec())
        assert split.info["relations"] == [{"source": 0, "target": 1, "lag": 2}]

    def test_lag_zero_identical_optimal_predictors(self):
        spec = _temporal_spec(relations=(dt.TransferRelation(0, 1, 0),))
        split = dt.generate_temporal_tasks(spec)
        bayes = split.info["bayes_scores"]["train"]
        np.testing.assert_array_equal(bayes[:, 0], bayes[:, 1])

    def test_bayes_rule_near_perfect_on_clean_data(self):
        spec = _temporal_spec(channel_noise=0.05)
        split = dt.generate_temporal_tasks(spec)
        batch = split.train
        bayes = split.info["bayes_scores"]["train"]
        for d in range(2):
            rows = batch.label_mask[:, d]
            assert auroc(bayes[rows, d], batch.labels[rows, d]) > 0.99

    def test_shuffled_timesteps_destroy_predictability(self):
        spec = _temporal_spec(samples_per_task=(600, 600), channel_noise=0.05)
        split = dt.generate_temporal_tasks(spec)
        batch = split.train
        rng = np.random.default_rng(0)
        shuffled = batch.inputs.copy()
        for b in range(shuffled.shape[0]):
            shuffled[b] = shuffled[b, rng.permutation(shuffled.shape[1])]
        scores = dt.temporal_bayes_scores(spec, shuffled, task=0)
        rows = batch.label_mask[:, 0]
        value = auroc(scores[rows], batch.labels[rows, 0])
        assert abs(value - 0.5) <= 0.05

    def test_determinism(self):
        a = dt.generate_temporal_tasks(_temporal_spec())
        b = dt.generate_temporal_tasks(_temporal_spec())
        assert _split_digest(a) == _split_digest(b)

    def test_infeasible_lag(self):
        with pytest.raises(ConfigError):
            _temporal_spec(relations=(dt.TransferRelation(0, 1, 99),))


class TestCsvRoundTrip:
    def test_round_trip_lossless(self, tmp_path):
        split = dt.generate_temporal_tasks(_temporal_spec())
        manifest = dt.export_dataset(split, tmp_path)
        loaded = dt.ingest_csv(manifest)
        for name in ("train", "valid", "test"):
            original = split.batches()[name]
            reloaded = loaded.batches()[name]
            np.testing.assert_array_equal(original.inputs, reloaded.inputs)
            np.testing.assert_array_equal(original.labels * original.label_mask,
                                          reloaded.labels)
            np.testing.assert_array_equal(original.label_mask,
                                          reloaded.label_mask)
            np.testing.assert_array_equal(original.timestep_counts,
                                          reloaded.timestep_counts)

    def test_row_accounting(self, tmp_path):
        split = dt.generate_temporal_tasks(_temporal_spec())
        dt.export_dataset(split, tmp_path)
        batch, report = dt.read_episodes_csv(tmp_path / "train.csv")
        assert report["rows_read"] == report["rows_accounted"]
        assert report["rows_read"] == int(batch.timestep_counts.sum())
        assert report["imputed_cells"] == 0

    def test_ingest_directory_path(self, tmp_path):
        split = dt.generate_imbalanced_tasks(_imbalanced_spec())
        dt.export_dataset(split, tmp_path)
        loaded = dt.ingest_csv(tmp_path)
        assert loaded.num_tasks == 3


def _write_csv(tmp_path, rows, m=2, d=2):
    path = tmp_path / "episodes.csv"
    header = ",".join(dt._columns(m, d))
    content = f"# {dt.SCHEMA_VERSION} features={m} tasks={d}\n" + header + "\n"
    content += "\n".join(rows) + "\n"
    path.write_text(content)
    return path


class TestIngestionStrictness:
    def test_empty_feature_cell_imputed_zero(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.5,,1,0,1,0", "a,1,2.5,3.5,1,0,1,0"])
        batch, report = dt.read_episodes_csv(path)
        assert batch.inputs[0, 0, 1] == 0.0
        assert report["imputed_cells"] == 1

    def test_mask_zero_excludes_label(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.0,2.0,1,,1,0"])
        batch, _ = dt.read_episodes_csv(path)
        assert not batch.label_mask[0, 1]
        assert batch.label_mask[0, 0]
        assert batch.labels[0, 1] == 0.0

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(f"# {dt.SCHEMA_VERSION} features=2 tasks=2\n"
                        "instance_id,timestep,feature_1,label_task_1,"
                        "label_task_2,mask_task_1,mask_task_2\n"
                        "a,0,1.0,1,0,1,1\n")
        with pytest.raises(IngestionError, match="feature_2"):
            dt.read_episodes_csv(path)

    def test_non_monotone_timestep_names_row(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.0,2.0,1,0,1,0",
                                     "a,2,1.0,2.0,1,0,1,0"])
        with pytest.raises(IngestionError, match=":4:"):
            dt.read_episodes_csv(path)

    def test_duplicate_instance_timestep_names_row(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.0,2.0,1,0,1,0",
                                     "a,0,1.0,2.0,1,0,1,0"])
        with pytest.raises(IngestionError, match="duplicate"):
            dt.read_episodes_csv(path)

    def test_non_contiguous_instance_rejected(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.0,2.0,1,0,1,0",
                                     "b,0,1.0,2.0,1,0,1,0",
                                     "a,1,1.0,2.0,1,0,1,0"])
        with pytest.raises(IngestionError, match="contiguous|duplicate"):
            dt.read_episodes_csv(path)

    def test_masked_in_empty_label_rejected(self, tmp_path):
        path = _write_csv(tmp_path, ["a,0,1.0,2.0,,0,1,0"])
        with pytest.raises(IngestionError, match="label_task_1"):
            dt.read_episodes_csv(path)

    def test_missing_schema_header(self, tmp_path):
        path = tmp_path / "no_header.csv"
        path.write_text("instance_id,timestep\n")
        with pytest.raises(IngestionError, match="schema"):
            dt.read_episodes_csv(path)
