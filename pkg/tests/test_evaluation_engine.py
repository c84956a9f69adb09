import math

import pandas as pd
import pytest

from spg_concept_learner.block_world import Block, Pose, Scene
from spg_concept_learner.concept_dsl import ConceptLibrary, parse_program_text
from spg_concept_learner.config_manager import AppConfig, CorpusConfig
from spg_concept_learner.corpus_manager import GOLD_PROGRAM_TEXT, DatasetSpec, generate_corpus, gold_library
from spg_concept_learner.evaluation_engine import (
    REPORT_COLUMNS,
    EvalReport,
    evaluate_library,
    evaluate_program,
    metrics_2d,
    program_accuracy,
    run_benchmark,
    run_program,
)


def _row_scene(offset=(0.0, 0.0, 0.0), count=4):
    blocks = [Block(i, "red", "cube", Pose(i + 0.5, 0.5, 0.5)) for i in range(count)]
    dx, dy, dz = offset
    moved = blocks[0].moved_to(blocks[0].pose.translated(dx, dy, dz))
    return Scene.from_blocks(blocks), Scene.from_blocks([moved, *blocks[1:]])


class TestMetrics2D:
    def test_identical(self):
        gold, _ = _row_scene()
        assert metrics_2d(gold, gold, gold.ids, gold.ids) == (1.0, 0.0)

    def test_horizontal_offset(self):
        gold, executed = _row_scene(offset=(10.0, 0.0, 0.0))
        iou, mse = metrics_2d(executed, gold, executed.ids, gold.ids)
        assert iou == pytest.approx(0.75)
        # 单个方块 x1、x2 各偏 10：(100 + 100) / 5 = 40，平均到 4 个方块
        assert mse == pytest.approx(10.0)

    def test_unit_offset(self):
        gold, executed = _row_scene(offset=(1.0, 0.0, 0.0))
        iou, mse = metrics_2d(executed, gold, executed.ids, gold.ids)
        assert iou == pytest.approx(0.75)
        assert mse == pytest.approx(0.1)
        _, single = metrics_2d(executed, gold, (0,), (0,))
        assert single == pytest.approx(0.4)

    def test_depth_offset_keeps_iou(self):
        gold, executed = _row_scene(offset=(0.0, 1.0, 0.0), count=1)
        iou, mse = metrics_2d(executed, gold, (0,), (0,))
        assert iou == pytest.approx(1.0)
        assert mse == pytest.approx(0.2)

    def test_missing_placements_count_as_zero(self):
        gold, _ = _row_scene()
        iou, _ = metrics_2d(gold, gold, gold.ids[:2], gold.ids)
        assert iou == pytest.approx(0.5)


class TestAccuracy:
    def test_equivalent_programs(self):
        gold = parse_program_text(GOLD_PROGRAM_TEXT["tower"])
        learned = parse_program_text("(def tower (n) (loop (+ n -1) (keep) (move top)) (keep))")
        assert program_accuracy(learned, gold, ConceptLibrary()) == 1

    def test_wrong_direction(self):
        gold = parse_program_text(GOLD_PROGRAM_TEXT["tower"])
        learned = parse_program_text("(def tower (n) (loop n (keep) (move right)))")
        assert program_accuracy(learned, gold, ConceptLibrary()) == 0

    def test_too_many_placements(self):
        gold = parse_program_text(GOLD_PROGRAM_TEXT["tower"])
        learned = parse_program_text("(def tower (n) (loop (+ n 1) (keep) (move top)))")
        assert program_accuracy(learned, gold, ConceptLibrary()) == 0

    def test_right_only_for_small_sizes(self):
        gold = parse_program_text(GOLD_PROGRAM_TEXT["tower"])
        learned = parse_program_text("(def tower (n) (keep) (move top) (keep) (move top) (keep))")
        assert program_accuracy(learned, gold, ConceptLibrary(), sizes=(3,)) == 1
        assert program_accuracy(learned, gold, ConceptLibrary(), sizes=(3, 4)) == 0

    def test_run_program_uses_supply_in_order(self):
        scene, ids = run_program(parse_program_text(GOLD_PROGRAM_TEXT["row"]), 3, ConceptLibrary(), 3)
        assert ids == (0, 1, 2)
        assert [scene.block(i).pose for i in ids] == [Pose(0.5, 0.5, 0.5), Pose(1.5, 0.5, 0.5),
                                                      Pose(2.5, 0.5, 0.5)]


class TestReports:
    def test_evaluate_missing_program(self):
        accuracy, iou, mse = evaluate_program(None, "tower", ConceptLibrary(), (3,))
        assert (accuracy, iou) == (0, 0.0)
        assert math.isnan(mse)

    def test_gold_library_scores_perfectly(self):
        library = gold_library()
        report = evaluate_library(library, {name: name for name in library.names}, sizes=(3, 4))
        assert list(report.rows.columns) == REPORT_COLUMNS
        assert len(report.rows) == len(library)
        assert (report.rows["accuracy"] == 1).all()
        assert report.rows["iou"].tolist() == pytest.approx([1.0] * len(library))
        aggregates = report.aggregates()
        assert sorted(aggregates["kind"]) == ["complex", "simple"]

    def test_reversed_names_map_to_gold(self):
        library = ConceptLibrary([parse_program_text("(def rewot (n) (loop n (keep) (move top)))")])
        report = evaluate_library(library, {"rewot": "tower"}, sizes=(3,))
        assert report.rows["structure"].tolist() == ["tower"]
        assert report.rows["accuracy"].tolist() == [1]

    def test_write_csv(self, tmp_path):
        rows = pd.DataFrame([{"structure": "tower", "variant": "lp", "accuracy": 1, "iou": 1.0,
                              "mse": 0.0, "expansions": 12}])
        path = tmp_path / "report.csv"
        EvalReport(rows).write_csv(str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert lines[1] == "tower,lp,1,1.000000,0.000000,12"

    def test_empty_aggregates(self):
        assert EvalReport().aggregates().empty


@pytest.mark.slow
@pytest.mark.asyncio
async def test_benchmark_on_generated_corpus(tmp_path):
    corpus = str(tmp_path / "corpus")
    generate_corpus(DatasetSpec.named("I"), corpus, seed=0, config=CorpusConfig(demos_per_structure=2),
                    structures=("row", "tower", "staircase"))
    report = await run_benchmark(corpus, AppConfig(), variants=("lp",), sizes=(3, 4, 5))
    assert report.rows["structure"].tolist() == ["row", "tower", "staircase"]
    assert (report.rows["accuracy"] == 1).all()
