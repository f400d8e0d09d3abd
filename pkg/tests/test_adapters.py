"""Tests for the external dataset adapters."""

import numpy as np
import pandas as pd
import pytest

from adapters import class_folders_to_manifest, convert_annotation_list, write_shelf_splits
from errors import InvalidInputError, ManifestLoadError
from ingestion import SHELVES_FILE, load_manifest, save_image


@pytest.fixture
def folder_tree(tmp_path):
    for name in ('cola', 'chips', 'background'):
        for i in range(2):
            save_image(np.full((16, 12, 3), 80, dtype=np.uint8), tmp_path / f"instances/{name}/{i}.png")
    (tmp_path / "instances/cola/notes.txt").write_text("not an image")
    return tmp_path


class TestClassFolders:

    def test_background_folder_enables_background(self, folder_tree):
        catalog = class_folders_to_manifest(folder_tree)
        assert catalog.names == ('chips', 'cola')
        assert catalog.include_background

        manifest = load_manifest(folder_tree)
        labels = sorted(r.class_id for r in manifest.instances)
        assert labels == [0, 0, 1, 1, 2, 2]

    def test_background_folder_ignored_when_disabled(self, folder_tree):
        catalog = class_folders_to_manifest(folder_tree, include_background=False)
        assert not catalog.include_background
        assert len(load_manifest(folder_tree).instances) == 4

    def test_missing_tree(self, tmp_path):
        with pytest.raises(ManifestLoadError):
            class_folders_to_manifest(tmp_path, instances_subdir='nowhere')


class TestAnnotationList:

    def test_xywh_with_renamed_columns(self, folder_tree):
        class_folders_to_manifest(folder_tree)
        save_image(np.zeros((100, 120, 3), dtype=np.uint8), folder_tree / "shelves/s1.png")
        source = folder_tree / "raw.csv"
        pd.DataFrame({'img': ["shelves/s1.png", "shelves/s1.png"], 'label': [7, 9],
                      'x': [10, 50], 'y': [5, 20], 'w': [20, 30], 'h': [40, 50]}).to_csv(source, index=False)

        out = convert_annotation_list(
            source, folder_tree,
            column_map={'img': 'image_path', 'label': 'class', 'x': 'x_min', 'y': 'y_min', 'w': 'width', 'h': 'height'},
            box_format='xywh', class_names={'7': 'cola', '9': 'chips'})
        assert list(out['class']) == ['cola', 'chips']
        assert list(out['x_max']) == [30, 80]
        assert list(out['y_max']) == [45, 70]

        manifest = load_manifest(folder_tree)
        boxes = sorted(a.box.as_tuple() for a in manifest.annotations)
        assert boxes == [(10, 5, 30, 45), (50, 20, 80, 70)]

    def test_missing_size_columns(self, tmp_path):
        source = tmp_path / "raw.csv"
        pd.DataFrame({'image_path': ['a.png'], 'class': ['x'], 'x_min': [0], 'y_min': [0]}).to_csv(source, index=False)
        with pytest.raises(ManifestLoadError):
            convert_annotation_list(source, tmp_path, box_format='xywh')

    def test_unknown_box_format(self, tmp_path):
        with pytest.raises(InvalidInputError):
            convert_annotation_list(tmp_path / "raw.csv", tmp_path, box_format='cxcywh')


class TestShelfSplits:

    def test_background_share(self, tmp_path):
        paths = [f"shelves/{i:03d}.png" for i in range(31)]
        frame = write_shelf_splits(tmp_path, seed=3, shelf_paths=paths)
        assert (frame['split'] == 'background').sum() == 2
        assert (frame['split'] == 'test').sum() == 29
        again = write_shelf_splits(tmp_path, seed=3, shelf_paths=paths)
        assert frame.equals(again)
        assert (tmp_path / SHELVES_FILE).exists()

    def test_at_least_one_test_shelf(self, tmp_path):
        frame = write_shelf_splits(tmp_path, background_fraction=0.9, shelf_paths=['a.png', 'b.png'])
        assert sorted(frame['split']) == ['background', 'test']

    def test_invalid_inputs(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_shelf_splits(tmp_path, shelf_paths=['a.png'])
        with pytest.raises(InvalidInputError):
            write_shelf_splits(tmp_path, background_fraction=0.0, shelf_paths=['a.png', 'b.png'])
