"""Tests for the command-line runner: parsing, run directories, exit codes and small end-to-end steps."""

import json

import numpy as np
import pandas as pd
import pytest

import config
from cli import CONVAE_CHECKPOINT, FCN_CHECKPOINT, SUBCOMMANDS, build_parser, main, run_subcommand
from data_model import ClassCatalog, Detection
from evaluation import MASK_DIAGNOSTICS_CSV, MASK_DIAGNOSTICS_JSON
from fcn_classifier import FcnConfig, build_fcn, save_fcn
from ingestion import InstanceImage, load_manifest, save_image, write_manifest
from pipeline_config import load_pipeline_config
from postprocess import write_detections
from refine_net import ConvAeConfig, build_convae, save_convae
from synth_planogram import SynthConfig, generate_dataset, save_dataset


@pytest.fixture
def shelf_manifest(tmp_path):
    """Two annotated test shelves with classes cola / chips."""
    root = tmp_path / "data"
    rng = np.random.default_rng(0)
    catalog = ClassCatalog(names=('cola', 'chips'))
    for name in ('s1', 's2'):
        save_image(rng.integers(0, 255, size=(40, 60, 3), dtype=np.uint8), root / f"shelves/{name}.png")
    write_manifest(root, catalog, annotations=[
        ("shelves/s1.png", 'cola', 2, 3, 20, 30),
        ("shelves/s1.png", 'chips', 25, 5, 50, 35),
        ("shelves/s2.png", 'cola', 10, 10, 30, 38),
    ], shelves=[("shelves/s1.png", 'test'), ("shelves/s2.png", 'test')])
    return root


@pytest.fixture
def tiny_fcn(tmp_path):
    path = tmp_path / "models" / FCN_CHECKPOINT
    model = build_fcn(FcnConfig(num_classes=2, stages=[2, 'M'], final_kernel=(2, 2), seed=0))
    return save_fcn(model, ClassCatalog(names=('cola', 'chips')), path)


def _common(tmp_path, manifest):
    return ['--output-dir', str(tmp_path / "runs"), '--set', f'paths.manifest="{manifest.as_posix()}"']


class TestParser:

    def test_subcommands_and_flags(self):
        args = build_parser().parse_args(['detect', '--refine', '--set', 'detect.threshold=0.3',
                                          '--set', 'pyramid.factor=2.0', '--seed', '3'])
        assert args.command == 'detect'
        assert args.refine and not args.no_pyramid
        assert args.overrides == ['detect.threshold=0.3', 'pyramid.factor=2.0']
        assert args.seed == 3

    def test_every_subcommand_parses(self):
        parser = build_parser()
        for name in SUBCOMMANDS:
            assert parser.parse_args([name]).command == name

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2

    def test_visualize_limit_default(self):
        assert build_parser().parse_args(['visualize']).limit == 20


class TestRunner:

    def test_unknown_subcommand(self, tmp_path):
        cfg = load_pipeline_config(output_dir=tmp_path)
        assert run_subcommand('train-everything', cfg) == 2

    def test_invalid_config(self, tmp_path):
        assert main(['eval', '--output-dir', str(tmp_path), '--set', 'nowhere.key=1']) == 1

    def test_missing_checkpoint(self, tmp_path, shelf_manifest):
        code = main(['detect'] + _common(tmp_path, shelf_manifest)
                    + ['--set', f'paths.fcn_checkpoint="{(tmp_path / "absent.pt").as_posix()}"'])
        assert code == 1

    def test_catalog_mismatch(self, tmp_path, shelf_manifest):
        path = tmp_path / "other.pt"
        save_fcn(build_fcn(FcnConfig(num_classes=2, stages=[2, 'M'], final_kernel=(2, 2))),
                 ClassCatalog(names=('tea', 'soap')), path)
        code = main(['detect', '--no-pyramid'] + _common(tmp_path, shelf_manifest)
                    + ['--set', f'paths.fcn_checkpoint="{path.as_posix()}"'])
        assert code == 1

    def test_refuses_non_empty_run_dir(self, tmp_path, shelf_manifest):
        run_dir = tmp_path / "runs" / "eval"
        run_dir.mkdir(parents=True)
        (run_dir / "leftover.txt").write_text("x")
        args = ['eval'] + _common(tmp_path, shelf_manifest)
        assert main(args) == 1
        assert not (run_dir / "resolved_config.json").exists()


class TestEndToEnd:

    def test_eval_of_ground_truth_is_perfect(self, tmp_path, shelf_manifest):
        manifest = load_manifest(shelf_manifest)
        detections = [Detection(a.image_id, a.class_id, a.box, 1.0) for a in manifest.annotations]
        det_path = write_detections(detections, tmp_path / "gt.jsonl", manifest.catalog)

        code = main(['eval', '--detections', str(det_path), '--no-plot'] + _common(tmp_path, shelf_manifest))
        assert code == 0

        run_dir = tmp_path / "runs" / "eval"
        report = json.loads((run_dir / "eval_report.json").read_text())
        assert report['mAP'] == pytest.approx(1.0)
        assert json.loads((run_dir / "resolved_config.json").read_text())['eval']['iou_threshold'] == 0.1
        metadata = json.loads((run_dir / "run_metadata.json").read_text())
        assert metadata['subcommand'] == 'eval'
        assert metadata['flags']['no_plot'] is True

    def test_detect_eval_visualize(self, tmp_path, shelf_manifest, tiny_fcn):
        common = _common(tmp_path, shelf_manifest) + ['--set', f'paths.fcn_checkpoint="{tiny_fcn.as_posix()}"']
        assert main(['detect', '--no-pyramid'] + common) == 0
        det_path = tmp_path / "runs" / "detect" / "detections.jsonl"
        assert det_path.exists()

        assert main(['eval'] + common) == 0
        report = json.loads((tmp_path / "runs" / "eval" / "eval_report.json").read_text())
        assert 0.0 <= report['mAP'] <= 1.0

        assert main(['visualize', '--limit', '1'] + common) == 0
        assert len(list((tmp_path / "runs" / "visualize" / "overlays").glob("*.png"))) == 1

    def test_pyramid_detect_with_run_name_and_force(self, tmp_path, shelf_manifest, tiny_fcn):
        common = _common(tmp_path, shelf_manifest) + ['--set', f'paths.fcn_checkpoint="{tiny_fcn.as_posix()}"',
                                                      '--run-name', 'pyr']
        assert main(['detect'] + common) == 0
        assert main(['detect'] + common) == 1
        assert main(['detect', '--force'] + common) == 0
        assert (tmp_path / "runs" / "pyr" / "detections.jsonl").exists()

    def test_toy_data_run(self, tmp_path):
        code = main(['toy-data', '--output-dir', str(tmp_path),
                     '--set', 'toy.instances_per_class=3', '--set', 'toy.background_shelves=1',
                     '--set', 'toy.shelf_hw=[64, 96]'])
        assert code == 0
        manifest = load_manifest(tmp_path / "toy-data")
        assert manifest.counts() == (18, 1, 0)
        assert (tmp_path / "toy-data" / "resolved_config.json").exists()
        assert (tmp_path / "toy-data" / "run_metadata.json").exists()

    def test_diagnose_masks(self, tmp_path, tiny_fcn):
        catalog = ClassCatalog(names=('cola', 'chips'))
        products = [InstanceImage(np.full((12, 8, 3), c, dtype=np.uint8), label, f"p{label}")
                    for label, c in ((1, (220, 40, 40)), (2, (40, 40, 220)))]
        synth_cfg = SynthConfig(product_pool=products, background_mode='black', canvas_small_hw=(32, 48),
                                canvas_large_hw=(48, 64), large_canvas_min_rows=3, rows_range=(1, 2),
                                columns_range=(2, 3), scale_range=(1.0, 1.0), jitter_px=2, samples=3, seed=1)
        synth_dir = save_dataset(generate_dataset(synth_cfg), tmp_path / "synth-test", catalog)
        convae_path = save_convae(build_convae(ConvAeConfig.for_catalog(catalog, filters=(2,))), catalog,
                                  tmp_path / "models" / CONVAE_CHECKPOINT, (16, 24))

        code = main(['diagnose-masks', '--synth-dir', str(synth_dir), '--output-dir', str(tmp_path / "runs"),
                     '--set', f'paths.fcn_checkpoint="{tiny_fcn.as_posix()}"',
                     '--set', f'paths.convae_checkpoint="{convae_path.as_posix()}"'])
        assert code == 0

        run_dir = tmp_path / "runs" / "diagnose-masks"
        rows = pd.read_csv(run_dir / MASK_DIAGNOSTICS_CSV, dtype={'image_id': str})
        assert list(rows['image_id']) == ['00000', '00001', '00002']
        assert rows[['raw_pixel_accuracy', 'refined_pixel_accuracy']].stack().between(0.0, 1.0).all()
        summary = json.loads((run_dir / MASK_DIAGNOSTICS_JSON).read_text())
        assert summary['shelves'] == 3
        assert summary['raw_false_positives'] == int(rows['raw_false_positives'].sum())

    def test_diagnose_masks_needs_refine_net(self, tmp_path, tiny_fcn):
        code = main(['diagnose-masks', '--output-dir', str(tmp_path / "runs"),
                     '--set', f'paths.fcn_checkpoint="{tiny_fcn.as_posix()}"',
                     '--set', f'paths.convae_checkpoint="{(tmp_path / "absent.pt").as_posix()}"'])
        assert code == 1


class TestReproducibility:

    SMALL_TOY = ['--set', 'toy.instances_per_class=6', '--set', 'toy.background_shelves=2',
                 '--set', 'toy.shelf_hw=[64, 96]',
                 '--set', 'training.max_epochs=2', '--set', 'training.background_patches=20',
                 '--set', 'training.background_patch_hw=[[24, 40], [24, 40]]',
                 '--set', 'synth.canvas_small_hw=[64, 128]', '--set', 'synth.canvas_large_hw=[96, 160]',
                 '--set', 'synth.rows_range=[1, 1]', '--set', 'synth.columns_range=[2, 3]',
                 '--set', 'synth.scale_range=[1.0, 1.5]', '--set', 'synth.jitter_px=4',
                 '--set', 'synth.samples=2']

    def _run_chain(self, out):
        base = ['--config', str(config.PROFILES_DIR / "toy.toml"), '--output-dir', str(out)] + self.SMALL_TOY
        test_set = ['--set', f'paths.test_manifest="{(out / "synth").as_posix()}"']
        for step in (['toy-data'], ['train-fcn'], ['synth']):
            assert main(step + base) == 0
        assert main(['detect', '--no-pyramid'] + base + test_set) == 0
        assert main(['eval', '--no-plot'] + base + test_set) == 0
        return out

    def test_same_seed_same_outputs(self, tmp_path):
        a = self._run_chain(tmp_path / "a")
        b = self._run_chain(tmp_path / "b")
        assert (a / "train-fcn" / "history.csv").read_bytes() == (b / "train-fcn" / "history.csv").read_bytes()
        assert (a / "detect" / "detections.jsonl").read_bytes() == (b / "detect" / "detections.jsonl").read_bytes()
        map_a = json.loads((a / "eval" / "eval_report.json").read_text())['mAP']
        map_b = json.loads((b / "eval" / "eval_report.json").read_text())['mAP']
        assert map_a == map_b
