import json
import subprocess
import sys

import numpy as np
import pytest

import chartgraph.gnn
from chartgraph.cli import main
from chartgraph.gnn import load_checkpoint


PIE_DOC = {
    "chart_id": "pie-demo",
    "image_size": [640, 480],
    "objects": [
        {"id": 0, "class": "pie", "bbox": [0.2, 0.2, 0.8, 0.8], "confidence": 0.95},
        {"id": 1, "class": "pie_slice", "bbox": [0.2, 0.2, 0.5, 0.5], "confidence": 0.9},
        {"id": 2, "class": "pie_slice", "bbox": [0.5, 0.5, 0.8, 0.8], "confidence": 0.9},
        {
            "id": 3,
            "class": "pie_label",
            "bbox": [0.05, 0.2, 0.15, 0.25],
            "confidence": 0.8,
            "ocr_text": "alpha",
        },
    ],
}


@pytest.fixture
def pie_annotation(tmp_path):
    path = tmp_path / "pie.json"
    path.write_text(json.dumps(PIE_DOC), encoding="utf-8")
    return path


class TestBuildGraph:
    def test_writes_graphs_and_dot(self, pie_annotation, tmp_path, capsys):
        out = tmp_path / "graphs"
        code = main(["build-graph", str(pie_annotation), "-o", str(out), "--dot"])
        assert code == 0
        written = json.loads(capsys.readouterr().out)
        assert set(written) == {"visual", "textual", "visual_dot", "textual_dot"}
        dot = (out / "pie.textual.dot").read_text()
        assert "PieToSlice" in dot
        visual = json.loads((out / "pie.visual.json").read_text())
        assert visual["n"] == 4
        assert len(visual["edges"]) == 6

    def test_malformed_file_exits_1_naming_field(self, tmp_path, capsys):
        bad = dict(PIE_DOC, objects=[dict(PIE_DOC["objects"][0], bbox=[0.9, 0.2, 0.8, 0.8])])
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad), encoding="utf-8")
        assert main(["build-graph", str(path), "-o", str(tmp_path)]) == 1
        assert "x_min" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["build-graph", str(tmp_path / "nope.json"), "-o", str(tmp_path)]) == 2

    def test_fully_connected_edge_count(self, pie_annotation, tmp_path, capsys):
        out = tmp_path / "fc"
        code = main(
            [
                "build-graph", str(pie_annotation), "-o", str(out),
                "--textual-edges", "fully-connected",
            ]
        )
        assert code == 0
        capsys.readouterr()
        doc = json.loads((out / "pie.textual.json").read_text())
        label_edges = [e for e in doc["edges"] if e[2] == "FullyConnected"]
        assert len(label_edges) == 4 * 3 // 2

    def test_byte_identical_outputs(self, pie_annotation, tmp_path, capsys):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["build-graph", str(pie_annotation), "-o", str(out1), "--dot"])
        main(["build-graph", str(pie_annotation), "-o", str(out2), "--dot"])
        capsys.readouterr()
        for name in ("pie.visual.json", "pie.textual.json", "pie.visual.dot", "pie.textual.dot"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestGradCheck:
    def test_default_run_passes(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        for block in ("gcn", "mlp", "decoder", "nll", "graph_module"):
            assert block in out

    def test_seed_sweep_passes(self):
        for seed in (1, 2, 3):
            assert main(["grad-check", "--seed", str(seed)]) == 0

    def test_sign_flip_mutation_is_caught(self, monkeypatch, capsys):
        real = chartgraph.gnn.gcn_backward

        def flipped(tape, d_h):
            d_x, d_w1, d_w2 = real(tape, d_h)
            return d_x, -d_w1, d_w2

        monkeypatch.setattr(chartgraph.gnn, "gcn_backward", flipped)
        assert main(["grad-check"]) == 3
        assert "gcn" in capsys.readouterr().err


class TestTrainCommand:
    CONFIG = {
        "train_size": 12, "test_size": 4, "epochs": 1, "grid_rows": 4, "grid_cols": 4,
        "dim": 8, "e_dim": 16, "embed_dim": 6, "decoder_hidden": 12,
    }

    def test_runs_and_writes_report(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(self.CONFIG), encoding="utf-8")
        out = tmp_path / "run"
        assert main(["train", str(cfg), "-o", str(out)]) == 0
        paths = json.loads(capsys.readouterr().out)
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["train_size"] == 12
        assert len(report["epoch_mean_nll"]) == 2
        assert (out / "losses.csv").exists()
        assert (out / "loss_curve.png").exists()
        assert set(paths) == {"report", "losses", "figure"}

    def test_graphs_none_baseline(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(self.CONFIG), encoding="utf-8")
        out = tmp_path / "none"
        assert main(["train", str(cfg), "-o", str(out), "--graphs", "none", "--no-figures"]) == 0
        capsys.readouterr()
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["graphs"] == "none"

    def test_repeat_runs_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(self.CONFIG), encoding="utf-8")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", str(cfg), "-o", str(out1)]) == 0
        assert main(["train", str(cfg), "-o", str(out2)]) == 0
        capsys.readouterr()
        for name in ("report.json", "losses.csv", "loss_curve.png"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_bad_config_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"optimizer": "rmsprop"}), encoding="utf-8")
        assert main(["train", str(cfg), "-o", str(tmp_path / "x")]) == 1
        assert "config" in capsys.readouterr().err

    def test_unknown_key_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}), encoding="utf-8")
        assert main(["train", str(cfg), "-o", str(tmp_path / "x")]) == 1

    def test_dataset_dump(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(self.CONFIG), encoding="utf-8")
        data = tmp_path / "data.jsonl"
        assert main(
            ["train", str(cfg), "-o", str(tmp_path / "d"), "--no-figures",
             "--dump-dataset", str(data)]
        ) == 0
        capsys.readouterr()
        lines = data.read_text().strip().splitlines()
        header = json.loads(lines[0])
        assert header["num_samples"] == 12
        assert len(lines) == 13


class TestFuseCommand:
    def test_dumps_bias_tensor(self, pie_annotation, tmp_path, capsys):
        out = tmp_path / "bias.json"
        code = main(
            ["fuse", str(pie_annotation), "-o", str(out), "--grid", "4x4", "--dim", "8",
             "--e-dim", "16"]
        )
        assert code == 0
        capsys.readouterr()
        tensors, meta = load_checkpoint(out.read_text())
        assert tensors["h_b"].shape == (16, 8)
        assert tensors["h_tilde"].shape == (16, 8)
        assert meta["chart_id"] == "pie-demo"
        assert np.isfinite(tensors["h_b"]).all()

    def test_roi_mode_forbids_grid(self, pie_annotation, tmp_path, capsys):
        out = tmp_path / "bias.json"
        assert main(
            ["fuse", str(pie_annotation), "-o", str(out), "--mode", "roi", "--grid", "4x4"]
        ) == 1
        assert "grid" in capsys.readouterr().err

    def test_roi_mode_runs(self, pie_annotation, tmp_path, capsys):
        out = tmp_path / "bias_roi.json"
        assert main(
            ["fuse", str(pie_annotation), "-o", str(out), "--mode", "roi", "--dim", "8",
             "--e-dim", "16"]
        ) == 0
        capsys.readouterr()
        tensors, _ = load_checkpoint(out.read_text())
        assert tensors["h_b"].shape == (36, 8)

    def test_deterministic(self, pie_annotation, tmp_path, capsys):
        out1, out2 = tmp_path / "b1.json", tmp_path / "b2.json"
        args = ["fuse", str(pie_annotation), "--grid", "4x4", "--dim", "8", "--e-dim", "16"]
        main(args + ["-o", str(out1)])
        main(args + ["-o", str(out2)])
        capsys.readouterr()
        assert out1.read_bytes() == out2.read_bytes()


class TestTopLevel:
    def test_version_lists_formats(self, capsys):
        assert main(["--version"]) == 0
        out = capsys.readouterr().out
        for token in ("chartgraph", "annotation-format", "graph-format", "checkpoint-format",
                      "dataset-format", "report-format", "embeddings-format"):
            assert token in out

    def test_no_command_exits_1(self, capsys):
        assert main([]) == 1

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["build-graph", "--bogus"]) == 1

    def test_installed_entry_point(self):
        result = subprocess.run(
            ["chartgraph", "--version"], capture_output=True, text=True, timeout=60
        )
        assert result.returncode == 0
        assert "chartgraph" in result.stdout
