from __future__ import annotations

import json
from pathlib import Path

import pytest

from sim2real.report import (
    ConflictingCell,
    ReportInputError,
    build_report,
    cell_from_result,
    load_cells,
    render_table,
)


def cmmd_result(variant: str, domain: str, value: float) -> dict:
    return {
        "cmmd": value,
        "mmd_sq": value / 1000.0,
        "n_ref": 10,
        "n_gen": 10,
        "config": {"sigma": 10.0, "scale": 1000.0, "estimator": "biased", "block": 1024},
        "variant": variant,
        "domain": domain,
    }


def write_results(tmp_path: Path, docs: list[dict]) -> list[Path]:
    paths = []
    for i, doc in enumerate(docs):
        path = tmp_path / f"result_{i}.json"
        path.write_text(json.dumps(doc))
        paths.append(path)
    return paths


class TestCells:
    def test_detects_each_metric(self):
        assert cell_from_result(cmmd_result("hybrid", "kitti", 1.781), "f").metric == "cmmd"
        assert cell_from_result(
            {"miou": 0.5594, "variant": "hybrid", "domain": "cs"}, "f"
        ).metric == "miou"
        assert cell_from_result(
            {"map50": 0.482, "variant": "synthetic", "domain": "kitti"}, "f"
        ).metric == "map50"

    def test_unstamped_result_rejected(self):
        with pytest.raises(ReportInputError, match="variant"):
            cell_from_result({"cmmd": 1.0}, "f")

    def test_unknown_variant_rejected(self):
        with pytest.raises(ReportInputError, match="variant"):
            cell_from_result(cmmd_result("flux", "kitti", 1.0), "f")

    def test_unknown_metric_rejected(self):
        with pytest.raises(ReportInputError, match="metric"):
            cell_from_result({"variant": "hybrid", "domain": "kitti"}, "f")


class TestBuildReport:
    def test_four_variant_single_column_table(self, tmp_path):
        docs = [
            cmmd_result("synthetic", "kitti", 3.734),
            cmmd_result("diffusion_only", "kitti", 2.488),
            cmmd_result("im2im_only", "kitti", 2.726),
            cmmd_result("hybrid", "kitti", 1.781),
        ]
        report = build_report(load_cells(write_results(tmp_path, docs)))
        assert [r["variant"] for r in report["rows"]] == [
            "synthetic", "diffusion_only", "im2im_only", "hybrid",
        ]
        assert report["columns"] == [{"domain": "kitti", "metric": "cmmd"}]
        table = render_table(report)
        assert table.count("\n") == 6  # header + rule + 4 rows
        assert "1.7810" in table

    def test_single_result_single_row(self, tmp_path):
        docs = [cmmd_result("synthetic", "kitti", 3.734)]
        report = build_report(load_cells(write_results(tmp_path, docs)))
        assert len(report["rows"]) == 1

    def test_conflicting_cell_rejected(self, tmp_path):
        docs = [
            cmmd_result("hybrid", "kitti", 1.781),
            cmmd_result("hybrid", "kitti", 1.800),
        ]
        with pytest.raises(ConflictingCell, match="hybrid"):
            build_report(load_cells(write_results(tmp_path, docs)))

    def test_rows_ordered_by_fixed_variant_order(self, tmp_path):
        docs = [
            cmmd_result("hybrid", "kitti", 1.781),
            cmmd_result("synthetic", "kitti", 3.734),
        ]
        report = build_report(load_cells(write_results(tmp_path, docs)))
        assert [r["variant"] for r in report["rows"]] == ["synthetic", "hybrid"]

    def test_mixed_metrics_get_separate_columns(self, tmp_path):
        docs = [
            cmmd_result("hybrid", "kitti", 1.781),
            {"miou": 0.5341, "variant": "hybrid", "domain": "kitti"},
        ]
        report = build_report(load_cells(write_results(tmp_path, docs)))
        assert report["columns"] == [
            {"domain": "kitti", "metric": "cmmd"},
            {"domain": "kitti", "metric": "miou"},
        ]

    def test_validates_against_schema(self, tmp_path):
        import jsonschema

        docs = [
            cmmd_result("synthetic", "cs", 4.805),
            cmmd_result("hybrid", "cs", 3.751),
            {"miou": 0.5594, "variant": "hybrid", "domain": "cs"},
        ]
        report = build_report(load_cells(write_results(tmp_path, docs)))
        schema = json.loads(
            (Path(__file__).parents[1] / "schemas" / "comparison-report.v1.json")
            .read_text()
        )
        jsonschema.validate(report, schema)


class TestRenderTable:
    def test_rendering_is_deterministic(self, tmp_path):
        docs = [
            cmmd_result("synthetic", "kitti", 3.734),
            cmmd_result("hybrid", "kitti", 1.781),
            {"map50": 0.482, "variant": "synthetic", "domain": "cs"},
        ]
        cells = load_cells(write_results(tmp_path, docs))
        a = render_table(build_report(cells))
        b = render_table(build_report(cells))
        assert a == b
        assert a.encode("utf-8") == b.encode("utf-8")

    def test_missing_cells_render_as_dash(self, tmp_path):
        docs = [
            cmmd_result("synthetic", "kitti", 3.734),
            {"map50": 0.482, "variant": "hybrid", "domain": "cs"},
        ]
        table = render_table(build_report(load_cells(write_results(tmp_path, docs))))
        lines = table.splitlines()
        assert lines[0].startswith("variant")
        assert any("-" in line for line in lines[2:])

    def test_columns_aligned(self, tmp_path):
        docs = [
            cmmd_result("synthetic", "kitti", 3.734),
            cmmd_result("diffusion_only", "kitti", 2.488),
        ]
        table = render_table(build_report(load_cells(write_results(tmp_path, docs))))
        lines = table.splitlines()
        pipes = [line.index("|") for line in lines if "|" in line]
        assert len(set(pipes)) == 1
