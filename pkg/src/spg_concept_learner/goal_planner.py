"""
目标条件前向搜索：把落地后的草图变成关系目标，再规划方块搬动把场景推到目标。

- 目标 = 在想象中从锚点构造概念后，被放置方块之间的场景图关系。
- 启发式 = 目标中尚未成立的关系个数（不可采纳）。
- Move 动作只保留严格降低启发式的；PlaceRandom 不受此限制，但每个计划有次数上限。
"""
import heapq
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .block_world import (
    Direction,
    Pose,
    Scene,
    is_clear,
    placement_valid,
    sample_free_position,
)
from .concept_dsl import ConceptLibrary
from .config_manager import PlannerConfig
from .exceptions import InsufficientObjectsError, TableFullError
from .scene_graph import RELATION_IOU_THRESHOLD, Relation, extract_scene_graph
from .sketch_parser import GroundedSketch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoalSpec:
    relations: FrozenSet[Relation]
    anchor: Pose
    object_ids: Tuple[int, ...] = ()
    # 参照物：计划不能搬动
    fixed: FrozenSet[int] = frozenset()

    @property
    def ids(self) -> Set[int]:
        named = {r.subject for r in self.relations} | {r.object for r in self.relations}
        return named


@dataclass(frozen=True)
class Move:
    direction: Direction
    mover: int
    reference: int
    pose: Optional[Pose] = field(default=None, compare=False)

    def __str__(self) -> str:
        return f"move({self.direction.value}, b{self.mover}, b{self.reference})"


@dataclass(frozen=True)
class PlaceRandom:
    mover: int
    pose: Optional[Pose] = field(default=None, compare=False)

    def __str__(self) -> str:
        return f"place-random(b{self.mover})"


PlannerAction = Union[Move, PlaceRandom]


@dataclass
class PlanningResult:
    success: bool
    actions: List[PlannerAction]
    final_scene: Scene
    expansions: int
    best_heuristic: int
    trace: List[Scene] = field(default_factory=list)


# ---- 锚点与目标 ----

def _fits(scene: Scene, poses: Sequence[Pose], ignore: Iterable[int]) -> bool:
    x_min, y_min, x_max, y_max = scene.table_extent
    ids, centers = scene.arrays
    ignore = set(ignore)
    keep = np.array([i not in ignore for i in ids], dtype=bool) if len(ids) else np.zeros(0, dtype=bool)
    others = centers[keep] if len(ids) else centers
    for pose in poses:
        if pose.x - 0.5 < x_min - 1e-6 or pose.x + 0.5 > x_max + 1e-6:
            return False
        if pose.y - 0.5 < y_min - 1e-6 or pose.y + 0.5 > y_max + 1e-6:
            return False
    if len(others) == 0:
        return True
    placed = np.asarray(poses, dtype=float)
    overlap = np.clip(1.0 - np.abs(placed[:, None, :] - others[None, :, :]), 0.0, None)
    return bool(np.prod(overlap, axis=2).max() <= 1e-6)


def choose_anchor(scene: Scene, offsets: Sequence[Tuple[float, float, float]], ignore: Iterable[int] = (),
                  rng: Optional[np.random.Generator] = None) -> Pose:
    """
    在桌面网格单元中找第一个锚点，使想象放置全部落在桌面内且不碰到任何已有方块。
    给出 rng 时按随机顺序扫描单元格。

    Raises:
        TableFullError: 没有可用锚点。
    """
    x_min, y_min, x_max, y_max = scene.table_extent
    cells = list(itertools.product(range(int(np.floor(x_max - x_min + 1e-6))),
                                   range(int(np.floor(y_max - y_min + 1e-6)))))
    if rng is not None:
        cells = [cells[k] for k in rng.permutation(len(cells))]
    ignore = tuple(ignore)
    for i, j in cells:
        anchor = Pose(x_min + i + 0.5, y_min + j + 0.5, 0.5)
        poses = [anchor.translated(*o) for o in offsets]
        if _fits(scene, poses, ignore):
            return anchor
    raise TableFullError(len(cells))


def imagine_scene(scene: Scene, grounded: GroundedSketch, library: ConceptLibrary,
                  anchor: Pose) -> Tuple[Scene, Tuple[int, ...]]:
    """把概念在想象中从 anchor 构造出来：按 id 顺序把落地方块放到各个放置位置上。"""
    offsets = library.relative_placements(grounded.concept, grounded.size)
    if len(offsets) > len(grounded.object_ids):
        raise InsufficientObjectsError(len(offsets), len(grounded.object_ids))
    imagined = scene
    placed = grounded.object_ids[:len(offsets)]
    for block_id, offset in zip(placed, offsets):
        imagined = imagined.with_pose(block_id, anchor.translated(*offset))
    return imagined, tuple(placed)


def goal_from_sketch(grounded: GroundedSketch, library: ConceptLibrary, anchor: Pose,
                     scene: Scene, threshold: float = RELATION_IOU_THRESHOLD) -> GoalSpec:
    """
    Raises:
        LibraryError: 概念不在库中。
    """
    library.get(grounded.concept)
    imagined, placed = imagine_scene(scene, grounded, library, anchor)
    graph = extract_scene_graph(imagined, placed, threshold)
    logger.debug("Goal for %s(%d): %s", grounded.concept, grounded.size, graph.lines())
    return GoalSpec(graph.relations, anchor, placed)


def relevant_objects(goal: GoalSpec, scene: Scene, threshold: float = RELATION_IOU_THRESHOLD) -> Set[int]:
    """从目标涉及的方块出发，按初始场景中的任意关系求传递闭包。"""
    relevant = set(goal.ids)
    if not relevant:
        return set()
    graph = extract_scene_graph(scene, threshold=threshold)
    neighbours = {}
    for r in graph.relations:
        neighbours.setdefault(r.subject, set()).add(r.object)
        neighbours.setdefault(r.object, set()).add(r.subject)
    frontier = list(relevant)
    while frontier:
        block_id = frontier.pop()
        for other in neighbours.get(block_id, ()):
            if other not in relevant:
                relevant.add(other)
                frontier.append(other)
    return relevant


def heuristic(scene: Scene, goal: GoalSpec, relevant: Optional[Iterable[int]] = None,
              threshold: float = RELATION_IOU_THRESHOLD) -> int:
    if not goal.relations:
        return 0
    ids = goal.ids if relevant is None else relevant
    present = extract_scene_graph(scene, ids, threshold).relations
    return len(goal.relations - present)


def _graspable(scene: Scene, block_id: int) -> bool:
    return is_clear(scene, block_id, Direction.TOP)


def apply_action(scene: Scene, action: PlannerAction) -> Scene:
    return scene.with_pose(action.mover, action.pose)


def successors(scene: Scene, goal: GoalSpec, config: PlannerConfig, rng: np.random.Generator,
               relevant: Optional[Set[int]] = None, random_used: int = 0) -> List[Tuple[PlannerAction, Scene]]:
    """
    枚举可用动作。Move(rel, b1, b2) 要求 b1 可抓取、b2 在 rel 方向空闲、新位置无碰撞且有支撑，
    并且严格降低启发式；PlaceRandom 只要求可抓取且未超过次数上限。
    """
    if relevant is None:
        relevant = relevant_objects(goal, scene, config.iou_threshold)
    current = heuristic(scene, goal, relevant, config.iou_threshold)
    ordered = sorted(relevant)
    out: List[Tuple[PlannerAction, Scene]] = []
    movable = [b for b in ordered if b not in goal.fixed]
    for mover in movable:
        if not _graspable(scene, mover):
            continue
        for direction in Direction:
            for reference in scene.ids:
                if reference == mover:
                    continue
                if not is_clear(scene, reference, direction, ignore=(mover,)):
                    continue
                pose = scene.block(reference).pose.moved(direction)
                if not placement_valid(scene, pose, ignore=(mover,)).valid:
                    continue
                nxt = scene.with_pose(mover, pose)
                if not config.greedy_pruning or heuristic(nxt, goal, relevant, config.iou_threshold) < current:
                    out.append((Move(direction, mover, reference, pose), nxt))
    if random_used < config.max_place_random:
        for mover in movable:
            if not _graspable(scene, mover):
                continue
            try:
                pose = sample_free_position(scene, rng, ignore=(mover,))
            except TableFullError:
                continue
            out.append((PlaceRandom(mover, pose), scene.with_pose(mover, pose)))
    return out


def _state_key(scene: Scene, relevant: Iterable[int]) -> Tuple:
    return tuple((i, scene.block(i).pose.rounded()) for i in sorted(relevant))


def forward_search(scene: Scene, goal: GoalSpec, config: PlannerConfig,
                   rng: Optional[np.random.Generator] = None) -> PlanningResult:
    """
    最佳优先搜索，按 f = g + h 排序，并列时取 h 小者、再取先生成者。
    第一个 h 为 0 的节点即返回；预算耗尽时返回启发式最小的部分计划。
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    relevant = relevant_objects(goal, scene, config.iou_threshold)
    h0 = heuristic(scene, goal, relevant, config.iou_threshold)
    logger.info("Goal search over %d relevant blocks, %d goal relations, initial heuristic %d",
                len(relevant), len(goal.relations), h0)

    counter = itertools.count()
    # (f, h, 序号, g, 场景, 动作序列, 已用 PlaceRandom 次数)
    open_list = [(h0, h0, next(counter), 0, scene, (), 0)]
    closed = set()
    best = (h0, (), scene)
    expansions = 0
    while open_list and expansions < config.max_expansions:
        f, h, _, g, current, actions, used = heapq.heappop(open_list)
        if h == 0:
            logger.info("Goal reached after %d expansions with %d actions", expansions, len(actions))
            return PlanningResult(True, list(actions), current, expansions, 0, _replay(scene, actions))
        key = _state_key(current, relevant)
        if key in closed:
            continue
        closed.add(key)
        expansions += 1
        if h < best[0]:
            best = (h, actions, current)
        for action, nxt in successors(current, goal, config, rng, relevant, used):
            if _state_key(nxt, relevant) in closed:
                continue
            nh = heuristic(nxt, goal, relevant, config.iou_threshold)
            extra = 1 if isinstance(action, PlaceRandom) else 0
            heapq.heappush(open_list, (g + 1 + nh, nh, next(counter), g + 1, nxt, actions + (action,), used + extra))

    logger.warning("No plan found after %d expansions; best heuristic %d", expansions, best[0])
    return PlanningResult(False, list(best[1]), best[2], expansions, best[0], _replay(scene, best[1]))


def _replay(scene: Scene, actions: Sequence[PlannerAction]) -> List[Scene]:
    trace = [scene]
    for action in actions:
        scene = apply_action(scene, action)
        trace.append(scene)
    return trace


def goal_from_relative(steps: Sequence[Tuple[int, Direction, int]], scene: Scene) -> GoalSpec:
    """相对放置的目标：每一步一条 direction(mover, reference) 关系，不被搬动的参照物固定。"""
    if not steps:
        raise ValueError("relative goal needs at least one placement")
    movers = tuple(mover for mover, _, _ in steps)
    relations = frozenset(Relation(direction, mover, reference) for mover, direction, reference in steps)
    fixed = frozenset(reference for _, _, reference in steps) - set(movers)
    return GoalSpec(relations, scene.block(steps[0][2]).pose, movers, fixed)


def plan_to_goal(scene: Scene, grounded: GroundedSketch, library: ConceptLibrary, config: PlannerConfig,
                 reference: Optional[Tuple[Direction, int]] = None) -> Tuple[GoalSpec, PlanningResult]:
    """
    从草图出发的完整目标规划：选锚点、求目标、前向搜索。

    给出 reference=(direction, id) 时锚点是参照物在 direction 一侧的位置，目标额外要求
    第一个放置的方块在参照物的 direction 一侧，参照物本身不动。
    """
    if reference is None:
        offsets = library.relative_placements(grounded.concept, grounded.size)
        anchor = choose_anchor(scene, offsets, ignore=grounded.object_ids)
    else:
        direction, reference_id = reference
        grounded = replace(grounded, object_ids=tuple(i for i in grounded.object_ids if i != reference_id))
        anchor = scene.block(reference_id).pose.moved(direction)
    goal = goal_from_sketch(grounded, library, anchor, scene, config.iou_threshold)
    if reference is not None and goal.object_ids:
        goal = replace(goal, relations=goal.relations | {Relation(direction, goal.object_ids[0], reference_id)},
                       fixed=frozenset({reference_id}))
    return goal, forward_search(scene, goal, config)
