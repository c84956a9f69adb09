from typing import Sequence, Tuple

import pytest

from spg_concept_learner.block_world import Block, ExecContext, Pose, Scene
from spg_concept_learner.concept_dsl import ConceptLibrary, execute, parse_program_text
from spg_concept_learner.corpus_manager import GOLD_PROGRAM_TEXT, gold_library
from spg_concept_learner.plan_search_engine import DemoTrace


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时较长的测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def supply_blocks(count: int, color: str = "red", shape: str = "cube", start_id: int = 0,
                  row: float = 0.5) -> Sequence[Block]:
    """在桌面靠前的位置排一行（满 20 个换行）待用方块。"""
    return [Block(start_id + k, color, shape, Pose((k % 20) + 0.5, row + (k // 20), 0.5))
            for k in range(count)]


def build_demo(concept: str, n: int, library: ConceptLibrary, name: str = None,
               color: str = "red", anchor: Tuple[float, float, float] = (10.5, 10.5, 0.5),
               distractors: int = 0) -> DemoTrace:
    """从 anchor 执行库中的概念，生成一条无噪声的演示。"""
    required = len(library.relative_placements(concept, n))
    blocks = list(supply_blocks(required, color))
    blocks += supply_blocks(distractors, "green", start_id=required, row=3.5)
    scene = Scene.from_blocks(blocks)
    trace = execute(concept, ExecContext(scene, Pose(*anchor), (), tuple(range(required))), library, n)
    name = name or concept
    instruction = f"Construct a {name} of size {n} using {color} cubes"
    return DemoTrace.from_keyframes(instruction, trace.keyframes, concept=name, size=n)


@pytest.fixture
def gold_lib() -> ConceptLibrary:
    return gold_library()


@pytest.fixture
def tower_lib() -> ConceptLibrary:
    return ConceptLibrary([parse_program_text(GOLD_PROGRAM_TEXT["tower"])])


@pytest.fixture
def make_demo():
    return build_demo


@pytest.fixture
def make_supply():
    return supply_blocks
