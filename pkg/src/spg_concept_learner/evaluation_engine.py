"""
评测：程序准确率、二维包围盒指标，以及完整的学习 + 评测基准。
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .block_world import Block, ExecContext, Pose, Scene, bbox_iou2d, render_bbox
from .concept_dsl import ConceptLibrary, Program, execute, placement_count
from .concept_learner import ConceptLearner
from .config_manager import AppConfig, SearchConfig
from .corpus_manager import gold_library, gold_name_map, load_corpus, structure_kind
from .exceptions import SPGError

logger = logging.getLogger(__name__)

DEFAULT_EVAL_SIZES = tuple(range(3, 11))
REPORT_COLUMNS = ["structure", "variant", "accuracy", "iou", "mse", "expansions"]

_EVAL_TABLE = (-1000.0, -1000.0, 1000.0, 1000.0)
_EVAL_ANCHOR = Pose(0.5, 0.5, 0.5)
_SUPPLY_Y = 900.5


def _supply_scene(count: int) -> Tuple[Scene, Tuple[int, ...]]:
    # 备用方块排在远离锚点的一行，构造时依次取用
    blocks = [Block(i, "gray", "cube", Pose(float(i) + 0.5, _SUPPLY_Y, 0.5)) for i in range(count)]
    return Scene.from_blocks(blocks, _EVAL_TABLE), tuple(range(count))


def run_program(program, n: int, library: ConceptLibrary, supply: int) -> Tuple[Scene, Tuple[int, ...]]:
    """
    从固定锚点、在只有备用方块的空桌面上执行程序。

    Returns:
        (执行后的场景, 按放置顺序排列的方块 id)

    Raises:
        SPGError: 执行失败（无效放置、方块用尽等）。
    """
    scene, ids = _supply_scene(supply)
    trace = execute(program, ExecContext(scene, _EVAL_ANCHOR, (), ids), library, n)
    return trace.context.scene, tuple(p.block_id for p in trace.placements)


def _pose_multiset(scene: Scene, ids: Iterable[int]) -> List[Tuple[float, float, float]]:
    return sorted(scene.block(i).pose.rounded() for i in ids)


def program_accuracy(learned: Program, gold: Program, library: ConceptLibrary,
                     sizes: Sequence[int] = DEFAULT_EVAL_SIZES,
                     gold_lib: Optional[ConceptLibrary] = None) -> int:
    """
    在每个尺寸下从同一锚点、用同样的方块供给执行两个程序，放置位姿的多重集合全部一致才得 1。
    学到的程序执行失败记 0。
    """
    gold_lib = gold_lib or library
    for n in sizes:
        supply = placement_count(gold, n, gold_lib)
        gold_scene, gold_ids = run_program(gold, n, gold_lib, supply)
        try:
            scene, ids = run_program(learned, n, library, supply)
        except SPGError as e:
            logger.info("Learned %s fails at size %d: %s", learned.name, n, e)
            return 0
        if len(ids) != len(gold_ids):
            return 0
        if not np.allclose(_pose_multiset(scene, ids), _pose_multiset(gold_scene, gold_ids), atol=1e-6):
            return 0
    return 1


def metrics_2d(executed: Scene, gold: Scene, executed_ids: Sequence[int],
               gold_ids: Sequence[int]) -> Tuple[float, float]:
    """
    按放置顺序配对比较投影包围盒：平均 2D IoU 与五个分量 (x1, y1, x2, y2, d) 的均方误差。
    个数不一致时按顺序配对到较短者，多出的方块 IoU 记 0。

    Returns:
        (mean_iou, mse)
    """
    total = max(len(executed_ids), len(gold_ids))
    if total == 0:
        return 1.0, 0.0
    paired = list(zip(executed_ids, gold_ids))
    ious, errors = [], []
    for e_id, g_id in paired:
        a, b = render_bbox(executed.block(e_id)), render_bbox(gold.block(g_id))
        ious.append(bbox_iou2d(a, b))
        errors.append(float(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))
    mean_iou = float(sum(ious)) / total
    mse = float(np.mean(errors)) if errors else 0.0
    return mean_iou, mse


@dataclass
class EvalReport:
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=REPORT_COLUMNS))

    def aggregates(self) -> pd.DataFrame:
        """按 (variant, simple/complex) 对结构做不加权平均。"""
        if self.rows.empty:
            return pd.DataFrame(columns=["variant", "kind", "accuracy", "iou", "mse"])
        frame = self.rows.copy()
        frame["kind"] = frame["structure"].map(structure_kind)
        return frame.groupby(["variant", "kind"], as_index=False)[["accuracy", "iou", "mse"]].mean()

    def write_csv(self, path: str) -> None:
        self.rows[REPORT_COLUMNS].to_csv(path, index=False, float_format="%.6f")


def evaluate_program(learned: Optional[Program], gold_concept: str, library: ConceptLibrary,
                     sizes: Sequence[int], gold_lib: Optional[ConceptLibrary] = None) -> Tuple[int, float, float]:
    """返回 (accuracy, 平均 2D IoU, 平均 MSE)；没有学到程序时为 (0, 0, nan)。"""
    gold_lib = gold_lib or gold_library()
    gold = gold_lib.get(gold_concept)
    if learned is None:
        return 0, 0.0, float("nan")
    accuracy = program_accuracy(learned, gold, library, sizes, gold_lib)
    ious, mses = [], []
    for n in sizes:
        supply = placement_count(gold, n, gold_lib)
        gold_scene, gold_ids = run_program(gold, n, gold_lib, supply)
        try:
            scene, ids = run_program(learned, n, library, supply)
        except SPGError:
            ious.append(0.0)
            continue
        iou, mse = metrics_2d(scene, gold_scene, ids, gold_ids)
        ious.append(iou)
        mses.append(mse)
    return accuracy, float(np.mean(ious)), float(np.mean(mses)) if mses else float("nan")


async def run_benchmark(corpus_dir: str, config: AppConfig, variants: Sequence[str] = ("lp",),
                        budget: Optional[int] = None, sizes: Sequence[int] = DEFAULT_EVAL_SIZES,
                        log: Optional[logging.Logger] = None) -> EvalReport:
    """
    每个变体都从空库出发，按课程顺序学习语料中的全部结构，再与金标准程序比较。
    单个结构学习失败记准确率 0，不中断整体运行。
    """
    log = log or logger
    grouped = load_corpus(corpus_dir)
    names = gold_name_map(corpus_dir)
    gold_lib = gold_library()
    rows = []
    for variant in variants:
        overrides = {"budget": budget} if budget else {}
        search = SearchConfig.for_variant(variant, **{**config.search.model_dump(
            exclude={"use_library", "use_pruner"}), **overrides})
        learner = ConceptLearner(config, log, search_config=search)
        outcomes = await learner.learn_curriculum(grouped)
        for outcome in outcomes:
            gold_concept = names.get(outcome.concept, outcome.concept)
            if gold_concept not in gold_lib:
                log.warning("No gold program for %s; skipped", outcome.concept)
                continue
            accuracy, iou, mse = evaluate_program(outcome.program, gold_concept, learner.library, sizes, gold_lib)
            rows.append({"structure": gold_concept, "variant": variant, "accuracy": accuracy,
                         "iou": iou, "mse": mse, "expansions": outcome.expansions})
            log.info("%s [%s]: accuracy %d, iou %.4f, expansions %d",
                     gold_concept, variant, accuracy, iou, outcome.expansions)
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))


async def run_budget_sweep(corpus_dir: str, config: AppConfig, budgets: Sequence[int],
                           variants: Sequence[str] = ("lp", "l"),
                           sizes: Sequence[int] = DEFAULT_EVAL_SIZES) -> pd.DataFrame:
    """对每个 (变体, 预算) 跑一次基准，报告平均准确率和平均扩展次数。"""
    frames = []
    for budget in budgets:
        report = await run_benchmark(corpus_dir, config, variants, budget, sizes)
        frame = report.rows.groupby("variant", as_index=False)[["accuracy", "expansions"]].mean()
        frame.insert(1, "budget", budget)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["variant", "budget", "accuracy", "expansions"])
    return pd.concat(frames, ignore_index=True)


def evaluate_library(library: ConceptLibrary, name_map: Dict[str, str],
                     sizes: Sequence[int] = DEFAULT_EVAL_SIZES, variant: str = "-") -> EvalReport:
    """评测一个已学好的库（CLI eval 子命令）。"""
    gold_lib = gold_library()
    rows = []
    for program in library:
        gold_concept = name_map.get(program.name, program.name)
        if gold_concept not in gold_lib:
            continue
        accuracy, iou, mse = evaluate_program(program, gold_concept, library, sizes, gold_lib)
        rows.append({"structure": gold_concept, "variant": variant, "accuracy": accuracy,
                     "iou": iou, "mse": mse, "expansions": 0})
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))
