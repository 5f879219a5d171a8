"""Closed-loop acceptance: the adapter's classifier exports feed the
pseudo-label toolkit, whose outputs train segmenters whose quality ordering
must match the supervision quality ordering. The toolkit is only touched
through its command line and file formats."""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from camadapter.train import export_features, train_classifier, train_segmenter

DATASET_SEED = 11
TRAIN_SEED = 0


def run_cli(module, *args):
    proc = subprocess.run(
        [sys.executable, "-m", module, *map(str, args)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, f"{module} {args}: {proc.stderr}\n{proc.stdout}"
    return proc


def _verdict(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""), flush=True)
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("loop")
    run_cli("camseed", "synth", "--out", root / "data", "--seed", DATASET_SEED,
            "--count", "120")
    return root


@pytest.fixture(scope="module")
def exports(workspace):
    report = train_classifier(workspace / "data" / "manifest.json", workspace / "clf",
                              seed=TRAIN_SEED, epochs=20)
    manifest = export_features(workspace / "clf" / "classifier.pt",
                               workspace / "data" / "manifest.json",
                               workspace / "exports")
    return workspace, report, manifest


def test_export_contract(exports):
    workspace, report, manifest = exports
    gate_ok = report["accuracy"] >= 0.95
    # every export must be readable by the toolkit's strict reader: a full
    # fuse run over the new manifest exercises exactly that
    proc = run_cli("camseed", "fuse", "--manifest", manifest,
                   "--out", workspace / "fuse_um", "--mode", "um_cam")
    fuse_clean = "0 failed" in proc.stdout
    shapes_ok = True
    doc = json.loads(Path(manifest).read_text())
    for entry in doc["entries"]:
        refs = entry.get("feature_export_paths", [])
        if entry["label"] == "positive":
            shapes = []
            for ref in refs:
                feats = np.load(Path(manifest).parent / ref["features"])
                grads = np.load(Path(manifest).parent / ref["gradients"])
                shapes_ok &= feats.shape == grads.shape and np.isfinite(feats).all()
                shapes_ok &= bool(np.isfinite(grads).all())
                shapes.append(feats.shape[-2:])
            shapes_ok &= shapes == sorted(shapes, reverse=True) and len(refs) == 5
    ok = gate_ok and fuse_clean and shapes_ok
    _verdict("export contract (gate + reader round trip)", ok,
             f"accuracy={report['accuracy']:.3f}, fuse clean={fuse_clean}, "
             f"shapes ok={shapes_ok}")


def test_closed_loop_quality_ordering(exports):
    workspace, _, manifest = exports
    start = time.monotonic()
    run_cli("camseed", "fuse", "--manifest", manifest, "--out", workspace / "fuse_um",
            "--mode", "um_cam")
    run_cli("camseed", "fuse", "--manifest", manifest, "--out", workspace / "fuse_last",
            "--mode", "last_layer_only")
    run_cli("camseed", "spl", "--manifest", manifest, "--maps", workspace / "fuse_um",
            "--out", workspace / "spl", "--alpha", "4.0")

    # stage-1 sanity: thresholded fused maps must clearly localize the target
    run_cli("camseed", "eval", "--manifest", manifest,
            "--pred", workspace / "spl" / "pseudo_mask", "--mode", "per_slice_2d",
            "--out", workspace / "pseudo_report.json")
    pseudo_dsc = json.loads((workspace / "pseudo_report.json").read_text())["summary"]["mean_dsc"]
    assert pseudo_dsc > 0.5

    test_manifest = workspace / "exports" / "manifest_test.json"
    doc = json.loads(Path(manifest).read_text())
    doc["entries"] = [e for e in doc["entries"] if e.get("split") == "test"]
    test_manifest.write_text(json.dumps(doc, indent=2, sort_keys=True))

    runs = {
        "grad_cam_baseline": dict(mode="grad_cam_only", um_dir=workspace / "fuse_last"),
        "um_cam": dict(mode="um_cam", um_dir=workspace / "fuse_um"),
        "spl": dict(mode="spl", spl_dir=workspace / "spl"),
        "um_cam_plus_spl": dict(mode="um_cam_plus_spl", um_dir=workspace / "fuse_um",
                                spl_dir=workspace / "spl", lam=0.1),
    }
    scores = {}
    for name, kwargs in runs.items():
        pred_dir = workspace / f"pred_{name}"
        train_segmenter(manifest, pred_dir, seed=TRAIN_SEED, epochs=40, **kwargs)
        run_cli("camseed", "eval", "--manifest", test_manifest, "--pred", pred_dir,
                "--mode", "per_slice_2d", "--out", workspace / f"report_{name}.json")
        summary = json.loads((workspace / f"report_{name}.json").read_text())["summary"]
        scores[name] = summary["mean_dsc"]

    elapsed = time.monotonic() - start
    ordered = (
        scores["um_cam_plus_spl"] >= scores["spl"]
        >= scores["um_cam"] >= scores["grad_cam_baseline"]
    )
    ok = ordered and elapsed < 1800.0
    _verdict(
        "closed-loop supervision ordering",
        ok,
        "um+spl=%.4f >= spl=%.4f >= um=%.4f >= baseline=%.4f, %.0fs"
        % (scores["um_cam_plus_spl"], scores["spl"], scores["um_cam"],
           scores["grad_cam_baseline"], elapsed),
    )
