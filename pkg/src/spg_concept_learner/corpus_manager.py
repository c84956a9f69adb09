"""
数据集管理：金标准概念库、三个数据集变体的生成，以及语料目录的读写。

目录结构:
    <out>/manifest.json       每条演示的元数据
    <out>/demos/<name>_<n>_<k>.json
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .block_world import Block, ExecContext, Scene, sample_free_position
from .concept_dsl import ConceptLibrary, Program, execute, parse_program_text
from .config_manager import CorpusConfig
from .exceptions import CorpusError, TableFullError
from .goal_planner import choose_anchor
from .plan_search_engine import DemoTrace

logger = logging.getLogger(__name__)

# 按课程顺序（依赖在前）排列
GOLD_PROGRAM_TEXT: Dict[str, str] = {
    "row": "(def row (n) (loop n (keep) (move right)))",
    "column": "(def column (n) (loop n (keep) (move front)))",
    "tower": "(def tower (n) (loop n (keep) (move top)))",
    "inverted_row": "(def inverted_row (n) (loop n (keep) (move left)))",
    "inverted_column": "(def inverted_column (n) (loop n (keep) (move back)))",
    "diagonal_45": "(def diagonal_45 (n) (loop n (keep) (move front) (move right)))",
    "diagonal_135": "(def diagonal_135 (n) (loop n (keep) (move front) (move left)))",
    "diagonal_225": "(def diagonal_225 (n) (loop n (keep) (move back) (move left)))",
    "diagonal_315": "(def diagonal_315 (n) (loop n (keep) (move back) (move right)))",
    "staircase": "(def staircase (n) (loop n (call tower (+ i 1)) (move right)))",
    "inverted_staircase": "(def inverted_staircase (n) (loop n (call tower (+ i 1)) (move left)))",
    "pyramid": "(def pyramid (n) (loop n :trim 2 (call row (+ (* 2 n) (* -2 i) -1)) (move top) (move right)))",
    "arch_bridge": "(def arch_bridge (n) (call staircase n) (move left) (call inverted_staircase n))",
    "boundary": (
        "(def boundary (n)"
        " (call row (+ n -1)) (loop (+ n -1) (move right)) (move front)"
        " (call column (+ n -1)) (loop (+ n -1) (move front)) (move left)"
        " (call inverted_row (+ n -1)) (loop (+ n -1) (move left)) (move back)"
        " (call inverted_column (+ n -1)) (loop (+ n -1) (move back)) (move right))"
    ),
    "x": (
        "(def x (n)"
        " (call diagonal_45 n) (move back) (call diagonal_315 n) (move left)"
        " (call diagonal_225 n) (move front) (call diagonal_135 n))"
    ),
}

SIMPLE_STRUCTURES = (
    "row", "column", "tower", "inverted_row", "inverted_column",
    "diagonal_45", "diagonal_135", "diagonal_225", "diagonal_315",
)
COMPLEX_STRUCTURES = ("staircase", "inverted_staircase", "pyramid", "arch_bridge", "boundary", "x")
CURRICULUM = tuple(GOLD_PROGRAM_TEXT)

_SIZE_WORDS = {"tower": "height", "column": "height", "inverted_column": "height",
               "row": "length", "inverted_row": "length"}
_PLURALS = {"cube": "cubes", "dice": "dice", "lego": "legos"}
_TEMPLATES = (
    "Construct a {name} of {word} {n} using {color} {shapes}",
    "Build a {name} of {word} {n} with {color} {shapes}",
    "Make a {name} of {word} {n} using {color} {shapes}",
)


def gold_programs() -> List[Program]:
    return [parse_program_text(text) for text in GOLD_PROGRAM_TEXT.values()]


def gold_library() -> ConceptLibrary:
    return ConceptLibrary(gold_programs())


def structure_kind(concept: str) -> str:
    return "simple" if concept in SIMPLE_STRUCTURES else "complex"


@dataclass(frozen=True)
class DatasetSpec:
    """
    I: 尺寸 3..5；II: 与 I 相同但指令里的概念名反转；III: 尺寸 6..8。
    """
    variant: str
    sizes: Tuple[int, ...]
    reverse_names: bool = False

    @classmethod
    def named(cls, variant: str) -> "DatasetSpec":
        key = str(variant).upper()
        key = {"1": "I", "2": "II", "3": "III"}.get(key, key)
        if key == "I":
            return cls("I", (3, 4, 5))
        if key == "II":
            return cls("II", (3, 4, 5), reverse_names=True)
        if key == "III":
            return cls("III", (6, 7, 8))
        raise CorpusError(f"unknown dataset '{variant}', expected I, II or III")

    def name_for(self, concept: str) -> str:
        return concept[::-1] if self.reverse_names else concept


class ManifestEntry(BaseModel):
    file: str
    concept: str
    name: str
    size: int
    dataset: str


def render_instruction(name: str, concept: str, n: int, color: str, shape: str,
                       rng: np.random.Generator) -> str:
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    return template.format(name=name, word=_SIZE_WORDS.get(concept, "size"), n=n,
                           color=color, shapes=_PLURALS.get(shape, shape + "s"))


def generate_demo(concept: str, n: int, name: str, library: ConceptLibrary, config: CorpusConfig,
                  rng: np.random.Generator) -> DemoTrace:
    """
    随机初始场景（恰好所需数量的目标方块加若干干扰方块），从随机锚点执行金标准程序并记录关键帧。
    干扰方块的颜色与目标方块不同，保证落地精确。

    Raises:
        CorpusError: 桌面放不下。
    """
    required = len(library.relative_placements(concept, n))
    color = config.colors[int(rng.integers(len(config.colors)))]
    shape = config.shapes[int(rng.integers(len(config.shapes)))]
    other_colors = [c for c in config.colors if c != color]
    distractors = int(rng.integers(config.max_distractors + 1)) if other_colors else 0
    ids = [int(i) for i in rng.permutation(required + distractors)]
    target_ids = sorted(ids[:required])

    scene = Scene(table_extent=tuple(config.table_extent))
    try:
        for block_id in ids:
            if block_id in target_ids:
                block_color, block_shape = color, shape
            else:
                block_color = other_colors[int(rng.integers(len(other_colors)))]
                block_shape = config.shapes[int(rng.integers(len(config.shapes)))]
            pose = sample_free_position(scene, rng)
            scene = scene.with_block(Block(block_id, block_color, block_shape, pose))
        anchor = choose_anchor(scene, library.relative_placements(concept, n), rng=rng)
    except TableFullError as e:
        raise CorpusError(f"table too small for {concept}({n}) with {distractors} distractors: {e}") from e

    trace = execute(concept, ExecContext(scene, anchor, (), tuple(target_ids)), library, n)
    instruction = render_instruction(name, concept, n, color, shape, rng)
    return DemoTrace.from_keyframes(instruction, trace.keyframes, concept=name, size=n)


def generate_corpus(spec: DatasetSpec, out_dir: str, seed: int = 0,
                    config: Optional[CorpusConfig] = None,
                    structures: Sequence[str] = CURRICULUM) -> List[ManifestEntry]:
    """按结构 × 尺寸生成演示文件并写出 manifest.json；同一 seed 的输出逐字节相同。"""
    config = config or CorpusConfig()
    library = gold_library()
    rng = np.random.default_rng(seed)
    demo_dir = os.path.join(out_dir, "demos")
    os.makedirs(demo_dir, exist_ok=True)

    entries: List[ManifestEntry] = []
    for concept in structures:
        name = spec.name_for(concept)
        for k in range(config.demos_per_structure):
            n = spec.sizes[k % len(spec.sizes)]
            demo = generate_demo(concept, n, name, library, config, rng)
            filename = f"{name}_{n}_{k}.json"
            demo.dump(os.path.join(demo_dir, filename))
            entries.append(ManifestEntry(file=os.path.join("demos", filename), concept=concept,
                                         name=name, size=n, dataset=spec.variant))

    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump([e.model_dump() for e in entries], f, indent=2)
    logger.info("Generated dataset %s: %d demos for %d structures in %s",
                spec.variant, len(entries), len(structures), out_dir)
    return entries


def load_manifest(corpus_dir: str) -> List[ManifestEntry]:
    path = os.path.join(corpus_dir, "manifest.json")
    if not os.path.exists(path):
        raise CorpusError(f"no manifest.json in {corpus_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return [ManifestEntry.model_validate(item) for item in json.load(f)]


def load_corpus(corpus_dir: str) -> Dict[str, List[DemoTrace]]:
    """按课程顺序返回 {指令中的概念名: 演示列表}。没有 manifest 时读取 demos/ 下全部文件并按名字分组。"""
    grouped: Dict[str, List[DemoTrace]] = {}
    manifest_path = os.path.join(corpus_dir, "manifest.json")
    if os.path.exists(manifest_path):
        entries = load_manifest(corpus_dir)
        order = {c: i for i, c in enumerate(CURRICULUM)}
        for entry in sorted(entries, key=lambda e: order.get(e.concept, len(order))):
            grouped.setdefault(entry.name, []).append(DemoTrace.load(os.path.join(corpus_dir, entry.file)))
        return grouped

    demo_dir = os.path.join(corpus_dir, "demos")
    directory = demo_dir if os.path.isdir(demo_dir) else corpus_dir
    for filename in sorted(os.listdir(directory)):
        if not filename.endswith(".json"):
            continue
        demo = DemoTrace.load(os.path.join(directory, filename))
        key = demo.concept or filename.rsplit("_", 2)[0]
        grouped.setdefault(key, []).append(demo)
    if not grouped:
        raise CorpusError(f"no demonstrations found in {corpus_dir}")
    return grouped


def gold_name_map(corpus_dir: str) -> Dict[str, str]:
    """{指令中的概念名: 金标准概念名}"""
    return {e.name: e.concept for e in load_manifest(corpus_dir)}


def gen_corpus_summary(entries: Sequence[ManifestEntry]) -> str:
    if not entries:
        return "no demonstrations generated"
    structures = sorted({e.concept for e in entries})
    sizes = sorted({e.size for e in entries})
    return (f"dataset {entries[0].dataset}: {len(entries)} demos, {len(structures)} structures, "
            f"sizes {', '.join(map(str, sizes))}")
