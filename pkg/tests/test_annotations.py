import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellcount import annotations as ann
from cellcount import imaging
from cellcount.errors import AnnotationError, ParameterError


def cellcounter_xml(filename: str, groups: list[list[tuple[float, float]]]) -> bytes:
    type_blocks = []
    for type_id, markers in enumerate(groups, start=1):
        items = "".join(
            f"<Marker><MarkerX>{x}</MarkerX><MarkerY>{y}</MarkerY><MarkerZ>1</MarkerZ></Marker>"
            for x, y in markers
        )
        type_blocks.append(f"<Marker_Type><Type>{type_id}</Type>{items}</Marker_Type>")
    body = (
        "<CellCounter_Marker_File>"
        f"<Image_Properties><Image_Filename>{filename}</Image_Filename></Image_Properties>"
        f"<Marker_Data>{''.join(type_blocks)}</Marker_Data>"
        "</CellCounter_Marker_File>"
    )
    return ('<?xml version="1.0" encoding="UTF-8"?>\n' + body).encode()


def write_test_image(path, seed=0, shape=(8, 10)):
    rng = np.random.default_rng(seed)
    img = imaging.GrayImage(rng.uniform(0, 1, shape))
    path.write_bytes(imaging.write_pgm(img))


class TestCellCounterXml:
    def test_three_markers(self):
        data = cellcounter_xml("img_001.tif", [[(10, 20), (30, 40), (50, 60)]])
        parsed = ann.parse_cellcounter_xml(data)
        assert parsed.image_id == "img_001.tif"
        assert parsed.dots == [
            ann.DotAnnotation(10.0, 20.0),
            ann.DotAnnotation(30.0, 40.0),
            ann.DotAnnotation(50.0, 60.0),
        ]

    def test_zero_markers(self):
        parsed = ann.parse_cellcounter_xml(cellcounter_xml("empty.tif", [[]]))
        assert parsed.count() == 0

    def test_marker_type_groups_merged(self):
        data = cellcounter_xml("multi.tif", [[(1, 2), (3, 4)], [(5, 6), (7, 8), (9, 10)]])
        assert ann.parse_cellcounter_xml(data).count() == 5

    def test_malformed_xml_reports_byte_offset(self):
        with pytest.raises(AnnotationError, match="byte offset"):
            ann.parse_cellcounter_xml(b"<CellCounter_Marker_File><oops</CellCounter_Marker_File>")

    def test_missing_coordinate_names_marker_index(self):
        data = (
            b"<CellCounter_Marker_File><Marker_Data><Marker_Type>"
            b"<Marker><MarkerX>5</MarkerX><MarkerY>6</MarkerY></Marker>"
            b"<Marker><MarkerX>9</MarkerX></Marker>"
            b"</Marker_Type></Marker_Data></CellCounter_Marker_File>"
        )
        with pytest.raises(AnnotationError, match="marker 1"):
            ann.parse_cellcounter_xml(data)

    @settings(max_examples=20, deadline=None)
    @given(
        st.lists(
            st.lists(
                st.tuples(st.integers(0, 2000), st.integers(0, 2000)),
                max_size=6,
            ),
            min_size=1,
            max_size=4,
        )
    )
    def test_count_equals_marker_elements(self, groups):
        data = cellcounter_xml("prop.tif", groups)
        assert ann.parse_cellcounter_xml(data).count() == data.count(b"<Marker>")


class TestCsv:
    def test_empty_set_is_header_only(self):
        assert ann.write_csv(ann.AnnotationSet("a")) == "X,Y\n"

    def test_three_dots_four_lines(self):
        a = ann.AnnotationSet("a", [ann.DotAnnotation(1, 2), ann.DotAnnotation(3, 4), ann.DotAnnotation(5, 6)])
        assert len(ann.write_csv(a).splitlines()) == 4

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0, max_value=4000, allow_nan=False),
                st.floats(min_value=0, max_value=4000, allow_nan=False),
            ),
            max_size=20,
        )
    )
    def test_round_trip_lossless(self, coords):
        original = ann.AnnotationSet("rt", [ann.DotAnnotation(x, y) for x, y in coords])
        back = ann.parse_csv(ann.write_csv(original), image_id="rt")
        assert back == original

    def test_non_numeric_cell_reports_row(self):
        with pytest.raises(AnnotationError, match="row 3"):
            ann.parse_csv("X,Y\n1.0,2.0\n3.0,banana\n")

    def test_missing_header_rejected(self):
        with pytest.raises(AnnotationError, match="header"):
            ann.parse_csv("1.0,2.0\n")


class TestMarkers:
    def test_normalization(self):
        assert ann.normalize_marker("dapi") == "DAPI"
        assert ann.normalize_marker("Ki67 + TuJ1") == "Ki67+TuJ1"

    def test_unknown_marker_rejected(self):
        with pytest.raises(AnnotationError):
            ann.AnnotationSet("x", marker="NotAMarker")

    def test_unknown_magnification_rejected(self):
        with pytest.raises(AnnotationError):
            ann.AnnotationSet("x", magnification="63x")


class TestCleanDataset:
    def _pair(self, tmp_path, name, dots, seed):
        img = tmp_path / f"{name}.pgm"
        xml = tmp_path / f"{name}.xml"
        write_test_image(img, seed=seed)
        xml.write_bytes(cellcounter_xml(f"{name}.pgm", [dots]))
        return img, xml

    def test_orphan_image_rejected(self, tmp_path):
        img1, xml1 = self._pair(tmp_path, "one", [(1, 2)], seed=1)
        img2 = tmp_path / "two.pgm"
        write_test_image(img2, seed=2)
        manifest, rejects = ann.clean_dataset([(img1, xml1), (img2, None)])
        assert len(manifest) == 1
        assert [r.reason for r in rejects] == ["orphan_image"]

    def test_orphan_annotation_rejected(self, tmp_path):
        _, xml = self._pair(tmp_path, "lonely", [(1, 2)], seed=3)
        manifest, rejects = ann.clean_dataset([(None, xml)])
        assert len(manifest) == 0
        assert [r.reason for r in rejects] == ["orphan_annotation"]

    def test_content_duplicates_rejected_despite_rename(self, tmp_path):
        img1, xml1 = self._pair(tmp_path, "orig", [(5, 6), (7, 8)], seed=4)
        img2 = tmp_path / "copy.pgm"
        xml2 = tmp_path / "copy.xml"
        img2.write_bytes(img1.read_bytes())
        xml2.write_bytes(cellcounter_xml("copy.pgm", [[(5, 6), (7, 8)]]))
        manifest, rejects = ann.clean_dataset([(img1, xml1), (img2, xml2)])
        assert len(manifest) == 1
        assert [r.reason for r in rejects] == ["duplicate"]

    def test_clean_input_passes_through(self, tmp_path):
        pairs = [self._pair(tmp_path, f"img{i}", [(i, i + 1)], seed=10 + i) for i in range(4)]
        manifest, rejects = ann.clean_dataset(pairs)
        assert len(manifest) == 4 and rejects == []
        assert [r.image_id for r in manifest.records] == ["1", "2", "3", "4"]

    def test_idempotent(self, tmp_path):
        pairs = [self._pair(tmp_path, f"i{i}", [(i, 0)], seed=20 + i) for i in range(3)]
        manifest1, _ = ann.clean_dataset(pairs)
        again = [(r.image_path, r.annotation_path) for r in manifest1.records]
        manifest2, rejects = ann.clean_dataset(again)
        assert rejects == []
        assert [r.count for r in manifest2.records] == [r.count for r in manifest1.records]

    def test_metadata_passthrough(self, tmp_path):
        img, xml = self._pair(tmp_path, "meta", [(1, 1)], seed=30)
        manifest, _ = ann.clean_dataset(
            [(img, xml)],
            metadata={"meta": {"marker": "DAPI", "magnification": "20x", "original_name": "exp7_f3"}},
        )
        record = manifest.records[0]
        assert (record.marker, record.magnification, record.original_name) == ("DAPI", "20x", "exp7_f3")


class TestDatasetStats:
    def _manifest(self, counts, markers=None, magnifications=None):
        markers = markers or ["DAPI"] * len(counts)
        magnifications = magnifications or ["20x"] * len(counts)
        records = [
            ann.ManifestRecord(
                image_id=str(i + 1),
                original_name=f"o{i}",
                image_path=None,
                annotation_path=None,
                marker=markers[i],
                magnification=magnifications[i],
                width=10,
                height=10,
                count=c,
            )
            for i, c in enumerate(counts)
        ]
        return ann.DatasetManifest(records)

    def test_single_image(self):
        rows = ann.dataset_stats(self._manifest([10]))
        overall = rows[0]
        assert (overall.mean_cpi, overall.std_cpi, overall.min_cpi, overall.max_cpi) == (10.0, 0.0, 10, 10)

    def test_population_std_and_median(self):
        overall = ann.dataset_stats(self._manifest([4, 8]))[0]
        assert overall.mean_cpi == 6.0
        assert overall.std_cpi == 2.0
        assert overall.median_cpi == 6.0

    def test_grouping_by_marker_and_magnification(self):
        rows = ann.dataset_stats(
            self._manifest([1, 2, 3], markers=["DAPI", "DAPI", "PI"], magnifications=["20x", "40x", "40x"])
        )
        by_group = {(r.group_kind, r.group): r for r in rows}
        assert by_group[("marker", "DAPI")].n_images == 2
        assert by_group[("marker", "PI")].total_cells == 3
        assert by_group[("magnification", "40x")].n_images == 2

    def test_empty_manifest_rejected(self):
        with pytest.raises(ParameterError):
            ann.dataset_stats(ann.DatasetManifest([]))


class TestManifestIO:
    def test_directory_round_trip(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "annotations").mkdir()
        records = []
        for i in (1, 2):
            write_test_image(tmp_path / "images" / f"{i}.pgm", seed=40 + i)
            dots = ann.AnnotationSet(str(i), [ann.DotAnnotation(1.0 * i, 2.0 * i)])
            (tmp_path / "annotations" / f"{i}.csv").write_text(ann.write_csv(dots))
            records.append(
                ann.ManifestRecord(
                    image_id=str(i),
                    original_name=f"orig{i}",
                    image_path=tmp_path / "images" / f"{i}.pgm",
                    annotation_path=tmp_path / "annotations" / f"{i}.csv",
                    marker="DAPI",
                    magnification="20x",
                    width=10,
                    height=8,
                    count=1,
                )
            )
        manifest = ann.DatasetManifest(records)
        (tmp_path / "metadata.csv").write_text(ann.manifest_to_csv(manifest))
        loaded = ann.load_manifest(tmp_path)
        assert [r.image_id for r in loaded.records] == ["1", "2"]
        assert loaded.records[0].original_name == "orig1"
        assert loaded.records[1].image_path.is_file()

    def test_missing_metadata_rejected(self, tmp_path):
        with pytest.raises(ParameterError, match="metadata.csv"):
            ann.load_manifest(tmp_path)
