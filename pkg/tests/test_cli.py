"""Command-line behavior: idempotent generate, resumable run, analyze
exports, exit codes."""

import hashlib
import json

import numpy as np
import pytest
import yaml

from crosstask.cli import main


def _config_payload(tmp_path, variants=None, seeds=(0,), max_epochs=1,
                    graph_instances=2):
    return {
        "dataset": {
            "kind": "temporal",
            "num_tasks": 2,
            "num_features": 6,
            "samples_per_task": [60, 60],
            "timesteps": 4,
            "relations": [{"source": 0, "target": 1, "lag": 1}],
            "seed": 5,
            "channel_noise": 0.4,
        },
        "model": {"hidden_size": 4, "embed_layers": 1, "mc_samples": 2,
                  "dropout_rate": 0.1},
        "variants": variants or [{"family": "tp_amtl"}],
        "train": {"learning_rate": 0.01, "batch_size": 32,
                  "max_epochs": max_epochs, "patience": 3,
                  "l2_coefficient": 0.0002, "seeds": list(seeds)},
        "eval": {"output_dir": str(tmp_path / "exp"),
                 "graph_instances": graph_instances},
    }


def _write_config(tmp_path, payload, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def _tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenerate:
    def test_manifest_lists_three_splits(self, tmp_path):
        cfg = _write_config(tmp_path, _config_payload(tmp_path))
        out = tmp_path / "data"
        assert main(["generate", "-c", cfg, "-o", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["files"]) == {"train", "valid", "test"}
        for name in manifest["files"].values():
            assert (out / name).exists()

    def test_same_seed_identical_file_hashes(self, tmp_path):
        cfg = _write_config(tmp_path, _config_payload(tmp_path))
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        assert main(["generate", "-c", cfg, "-o", str(out1)]) == 0
        assert main(["generate", "-c", cfg, "-o", str(out2)]) == 0
        assert _tree_hash(out1) == _tree_hash(out2)

    def test_bad_spec_exits_two_naming_field(self, tmp_path, capsys):
        payload = _config_payload(tmp_path)
        payload["dataset"]["bogus_field"] = 3
        cfg = _write_config(tmp_path, payload)
        assert main(["generate", "-c", cfg, "-o", str(tmp_path / "x")]) == 2
        assert "bogus_field" in capsys.readouterr().err

    def test_infeasible_spec_exits_two(self, tmp_path, capsys):
        payload = _config_payload(tmp_path)
        payload["dataset"]["relations"] = [{"source": 0, "target": 1,
                                            "lag": 99}]
        cfg = _write_config(tmp_path, payload)
        assert main(["generate", "-c", cfg, "-o", str(tmp_path / "x")]) == 2
        assert "lag" in capsys.readouterr().err


class TestRun:
    def test_single_cell_produces_one_record(self, tmp_path):
        cfg = _write_config(tmp_path, _config_payload(tmp_path))
        assert main(["run", "-c", cfg]) == 0
        cells = list((tmp_path / "exp" / "cells").glob("*.json"))
        assert len(cells) == 1
        record = json.loads(cells[0].read_text())
        assert record["variant_name"] == "tp_amtl"
        assert (tmp_path / "exp" / "checkpoints").glob("*.ckpt")

    def test_rerun_recomputes_only_missing_cell(self, tmp_path):
        payload = _config_payload(tmp_path, seeds=(0, 1), max_epochs=1)
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        cells = sorted((tmp_path / "exp" / "cells").glob("*.json"))
        assert len(cells) == 2
        kept, removed = cells
        kept_before = kept.read_bytes()
        kept_mtime = kept.stat().st_mtime_ns
        removed.unlink()
        assert main(["run", "-c", cfg]) == 0
        assert removed.exists()
        assert kept.stat().st_mtime_ns == kept_mtime
        assert kept.read_bytes() == kept_before

    def test_interrupted_and_resumed_table_identical(self, tmp_path):
        payload = _config_payload(tmp_path, seeds=(0, 1))
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        table_full = (tmp_path / "exp" / "results" / "table.json").read_text()

        # simulate an interrupted run: drop one cell and the table, resume
        cells = sorted((tmp_path / "exp" / "cells").glob("*.json"))
        cells[1].unlink()
        (tmp_path / "exp" / "results" / "table.json").unlink()
        assert main(["run", "-c", cfg]) == 0
        table_resumed = (tmp_path / "exp" / "results" / "table.json").read_text()
        assert table_resumed == table_full

    def test_unknown_train_key_exits_two(self, tmp_path, capsys):
        payload = _config_payload(tmp_path)
        payload["train"]["momentum"] = 0.9
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 2
        assert "momentum" in capsys.readouterr().err


class TestAnalyze:
    def test_transfer_variant_exports_graphs_and_reports(self, tmp_path):
        payload = _config_payload(
            tmp_path, variants=[{"family": "stl"}, {"family": "tp_amtl"}],
            seeds=(0, 1), graph_instances=2)
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        assert main(["analyze", "-c", cfg]) == 0
        analysis = tmp_path / "exp" / "analysis"
        graphs = list((analysis / "graphs").glob("tp_amtl*instance*.csv"))
        assert len(graphs) == 4  # 2 seeds x 2 requested instances
        report = json.loads((analysis / "negative_transfer.json").read_text())
        assert "counts_per_variant" in report
        direction = json.loads((analysis / "direction_check.json").read_text())
        assert "0->1@lag1" in direction["tp_amtl"][0]

    def test_no_transfer_variant_gets_note(self, tmp_path):
        payload = _config_payload(
            tmp_path, variants=[{"family": "tp_amtl",
                                 "transfer_mode": "none",
                                 "label": "no_transfer"}], seeds=(0, 1))
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        assert main(["analyze", "-c", cfg]) == 0
        note = tmp_path / "exp" / "analysis" / "no_transfer_no_transfer.txt"
        assert note.exists()
        assert "empty" in note.read_text()

    def test_missing_cells_listed(self, tmp_path, capsys):
        payload = _config_payload(tmp_path, seeds=(0, 1))
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        cells = sorted((tmp_path / "exp" / "cells").glob("*.json"))
        cells[0].unlink()
        assert main(["analyze", "-c", cfg]) == 1
        err = capsys.readouterr().err
        assert "missing cells" in err

    def test_report_totals_match_recomputation(self, tmp_path):
        payload = _config_payload(
            tmp_path, variants=[{"family": "stl"}, {"family": "mtl"}],
            seeds=(0, 1), max_epochs=2)
        cfg = _write_config(tmp_path, payload)
        assert main(["run", "-c", cfg]) == 0
        assert main(["analyze", "-c", cfg]) == 0
        report = json.loads((tmp_path / "exp" / "analysis" /
                             "negative_transfer.json").read_text())

        from crosstask.evaluate import aggregate, negative_transfer_report
        from crosstask.train import RunRecord
        records = [RunRecord.from_dict(json.loads(p.read_text()))
                   for p in (tmp_path / "exp" / "cells").glob("*.json")]
        table = aggregate(records, n_runs=2)
        expected = negative_transfer_report(
            table.row("stl"), {"mtl": table.row("mtl")},
            stl_stderr=table.stderr["stl"])
        assert report["counts_per_variant"]["mtl"] == \
            expected["counts_per_variant"]["mtl"]


class TestInspect:
    def test_inspect_checkpoint(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, _config_payload(tmp_path))
        assert main(["run", "-c", cfg]) == 0
        ckpt = next((tmp_path / "exp" / "checkpoints").glob("*.ckpt"))
        assert main(["inspect-checkpoint", str(ckpt)]) == 0
        out = capsys.readouterr().out
        assert "tp_amtl" in out and "embed.W" in out

    def test_missing_file_exits_one(self, capsys):
        assert main(["inspect-checkpoint", "/nonexistent.ckpt"]) == 1
