"""End-to-end toy run of every subcommand, plus layout checks of external manifests when present."""

import json

import pandas as pd
import pytest

import config
from cli import main
from ingestion import load_manifest


@pytest.mark.slow
class TestToyExperiment:
    """The toy profile as shipped: 200 instances per class, 50 held-out synthetic shelves."""

    def test_full_chain(self, tmp_path):
        base = ['--config', str(config.PROFILES_DIR / "toy.toml"), '--output-dir', str(tmp_path)]
        test_set = ['--set', f'paths.test_manifest="{(tmp_path / "synth-test").as_posix()}"']

        def report(run_name):
            return json.loads((tmp_path / run_name / "eval_report.json").read_text())

        assert main(['toy-data'] + base) == 0
        assert main(['train-fcn'] + base) == 0
        assert (tmp_path / "train-fcn" / "fcn.pt").exists()
        history = pd.read_csv(tmp_path / "train-fcn" / "history.csv")
        assert len(history) >= 1

        assert main(['synth'] + base) == 0
        assert main(['train-refine'] + base) == 0
        assert (tmp_path / "train-refine" / "convae.pt").exists()
        refine_history = pd.read_csv(tmp_path / "train-refine" / "history.csv")
        assert refine_history['val_loss'].min() < refine_history['val_loss'].iloc[0]

        assert main(['synth', '--run-name', 'synth-test', '--set', 'synth.seed=999', '--set', 'synth.samples=50',
                     '--set', 'synth.scale_range=[1.5, 3.0]'] + base) == 0

        assert main(['detect'] + base + test_set) == 0
        assert main(['eval', '--no-plot'] + base + test_set) == 0
        pyramid_map = report("eval")['mAP']
        assert pyramid_map >= 0.5

        assert main(['detect', '--refine', '--run-name', 'detect-refined'] + base + test_set) == 0
        refined = tmp_path / "detect-refined" / "detections.jsonl"
        assert main(['eval', '--run-name', 'eval-refined', '--detections', str(refined)] + base + test_set) == 0
        assert report("eval-refined")['mAP'] >= pyramid_map
        assert (tmp_path / "eval-refined" / "pr_curves.csv").exists()

        assert main(['baseline'] + base + test_set) == 0
        baseline = tmp_path / "baseline" / "detections.jsonl"
        assert main(['eval', '--run-name', 'eval-baseline', '--detections', str(baseline), '--no-plot']
                    + base + test_set) == 0
        assert pyramid_map >= report("eval-baseline")['mAP']

        assert main(['diagnose-masks'] + base + test_set) == 0
        masks = json.loads((tmp_path / "diagnose-masks" / "mask_diagnostics.json").read_text())
        assert masks['shelves'] == 50
        assert masks['refined_false_positives'] < masks['raw_false_positives']
        assert masks['refined_pixel_accuracy'] >= masks['raw_pixel_accuracy']

        assert main(['sweep-threshold', '--no-plot'] + base + test_set) == 0
        sweep = pd.read_csv(tmp_path / "sweep-threshold" / "threshold_sweep.csv")
        assert list(sweep['threshold']) == list(config.SWEEP_THRESHOLDS)
        assert main(['visualize', '--limit', '2'] + base + test_set) == 0


@pytest.mark.parametrize("name, num_classes, background", [('cigarette', 10, True), ('grocery', 12, False)])
def test_external_manifest_layout(name, num_classes, background):
    root = config.EXTERNAL_DATA_DIR / name
    if not (root / "classes.json").exists():
        pytest.skip(f"{root} not present")
    manifest = load_manifest(root)
    assert manifest.catalog.num_classes == num_classes
    assert manifest.catalog.include_background == background
    assert manifest.shelves_with_split('test')
