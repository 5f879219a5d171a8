import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from camadapter.data import load_records
from camadapter.models import TapClassifier, TinySegmenter
from camadapter.train import export_features, train_classifier, train_segmenter


def run_cli(module, *args):
    return subprocess.run(
        [sys.executable, "-m", module, *map(str, args)],
        capture_output=True, text=True,
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    proc = run_cli("camseed", "synth", "--out", root, "--seed", "13", "--count", "60")
    assert proc.returncode == 0, proc.stderr
    return root / "manifest.json"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("clf")
    report = train_classifier(dataset, out, seed=0, epochs=15)
    return dataset, out, report


class TestModels:
    def test_tap_resolutions_strictly_decrease(self):
        model = TapClassifier()
        _, taps = model.forward_with_taps(torch.zeros(1, 1, 64, 64))
        sizes = [tuple(t.shape[-2:]) for t in taps]
        assert sizes == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]

    def test_segmenter_output_shape_and_range(self):
        model = TinySegmenter()
        with torch.no_grad():
            out = model(torch.rand(2, 1, 64, 64))
        assert out.shape == (2, 64, 64)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestClassifier:
    def test_reaches_accuracy_gate(self, trained):
        _, _, report = trained
        assert report["accuracy"] >= 0.95
        assert report["gate_passed"]

    def test_deterministic_given_seed(self, dataset, tmp_path):
        a = train_classifier(dataset, tmp_path / "a", seed=7, epochs=3)
        b = train_classifier(dataset, tmp_path / "b", seed=7, epochs=3)
        assert a["accuracy"] == b["accuracy"]

    def test_shuffled_labels_fail_gate_and_block_export(self, dataset, tmp_path):
        doc = json.loads(Path(dataset).read_text())
        rng = np.random.default_rng(0)
        labels = [e["label"] for e in doc["entries"]]
        doc["entries"] = [dict(e) for e in doc["entries"]]
        for entry, label in zip(doc["entries"], rng.permutation(labels)):
            entry["label"] = str(label)
        shuffled = Path(dataset).parent / "manifest_shuffled.json"
        shuffled.write_text(json.dumps(doc))
        report = train_classifier(shuffled, tmp_path / "clf", seed=0, epochs=6)
        assert report["accuracy"] < 0.95  # random labels do not generalize
        proc = run_cli("camadapter", "export",
                       "--checkpoint", tmp_path / "clf" / "classifier.pt",
                       "--manifest", shuffled, "--out", tmp_path / "exports")
        assert proc.returncode == 3
        assert "refusing" in proc.stderr


class TestExport:
    def test_export_files_and_manifest(self, trained, tmp_path):
        manifest_path, clf_dir, _ = trained
        out = tmp_path / "exports"
        new_manifest = export_features(clf_dir / "classifier.pt", manifest_path, out)
        records = load_records(new_manifest)
        positives = [r for r in records if r.positive]
        assert positives, "export should keep positive entries"
        for record in positives:
            refs = record.raw["feature_export_paths"]
            assert len(refs) == 5
            shapes = []
            for ref in refs:
                feats = np.load(out / ref["features"])
                grads = np.load(out / ref["gradients"])
                assert feats.shape == grads.shape
                assert feats.dtype == np.float32
                assert np.isfinite(feats).all() and np.isfinite(grads).all()
                shapes.append(feats.shape[-2:])
            assert shapes == sorted(shapes, reverse=True)
            assert len(set(shapes)) == len(shapes)  # strictly decreasing

    def test_gradients_nonzero_for_confident_positive(self, trained, tmp_path):
        manifest_path, clf_dir, _ = trained
        out = tmp_path / "exports"
        new_manifest = export_features(clf_dir / "classifier.pt", manifest_path, out)
        records = [r for r in load_records(new_manifest) if r.positive]
        confident = max(records, key=lambda r: r.raw["feature_export_paths"][0]["class_score"])
        assert confident.raw["feature_export_paths"][0]["class_score"] > 0
        for ref in confident.raw["feature_export_paths"]:
            grads = np.load(out / ref["gradients"])
            assert np.abs(grads).max() > 0

    def test_primary_toolkit_consumes_exports(self, trained, tmp_path):
        manifest_path, clf_dir, _ = trained
        out = tmp_path / "exports"
        new_manifest = export_features(clf_dir / "classifier.pt", manifest_path, out)
        proc = run_cli("camseed", "fuse", "--manifest", new_manifest,
                       "--out", tmp_path / "fused")
        assert proc.returncode == 0, proc.stderr
        assert "0 failed" in proc.stdout


@pytest.fixture(scope="module")
def pseudo_labels(trained, tmp_path_factory):
    manifest_path, clf_dir, _ = trained
    work = tmp_path_factory.mktemp("work")
    exports = export_features(clf_dir / "classifier.pt", manifest_path, work / "exports")
    assert run_cli("camseed", "fuse", "--manifest", exports,
                   "--out", work / "fused").returncode == 0
    assert run_cli("camseed", "spl", "--manifest", exports, "--maps", work / "fused",
                   "--out", work / "spl", "--alpha", "4.0").returncode == 0
    return exports, work


class TestSegmenter:
    def test_lambda_extremes_differ(self, pseudo_labels, tmp_path):
        exports, work = pseudo_labels
        a = tmp_path / "lam0"
        b = tmp_path / "lam1"
        train_segmenter(exports, a, mode="um_cam_plus_spl", um_dir=work / "fused",
                        spl_dir=work / "spl", lam=0.0, seed=0, epochs=10)
        train_segmenter(exports, b, mode="um_cam_plus_spl", um_dir=work / "fused",
                        spl_dir=work / "spl", lam=1.0, seed=0, epochs=10)
        diffs = []
        for path in sorted(a.glob("s*.npy")):
            diffs.append(np.array_equal(np.load(path), np.load(b / path.name)))
        assert not all(diffs)

    def test_predictions_cover_manifest_and_are_binary(self, pseudo_labels, tmp_path):
        exports, work = pseudo_labels
        out = tmp_path / "preds"
        report = train_segmenter(exports, out, mode="spl", spl_dir=work / "spl",
                                 seed=0, epochs=4)
        records = load_records(exports)
        assert report["n_predictions"] == len(records)
        for record in records:
            pred = np.load(out / f"{record.slice_id}.npy")
            assert set(np.unique(pred)) <= {0.0, 1.0}

    def test_missing_supervision_dir_rejected(self, pseudo_labels, tmp_path):
        exports, _ = pseudo_labels
        with pytest.raises(ValueError, match="um-dir"):
            train_segmenter(exports, tmp_path / "x", mode="um_cam", seed=0, epochs=1)
        with pytest.raises(ValueError, match="spl-dir"):
            train_segmenter(exports, tmp_path / "x", mode="spl", seed=0, epochs=1)
