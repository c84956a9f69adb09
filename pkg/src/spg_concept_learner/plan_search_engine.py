"""
Plan 阶段：在原语动作和库中宏动作上做演示引导的蒙特卡洛树搜索。

- 没有 rollout：每次扩展一次性生成节点的全部子节点并用即时奖励初始化 Q，然后回溯。
- 奖励是放置的立方体与演示中下一个目标立方体的三维 IoU。
- 宏动作 Make_<cpt>(size) 在一条边上执行整个概念，边内奖励不打折，折扣按树的边计。
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .block_world import (
    KEEP,
    MOVES,
    RESET,
    STORE,
    ActionKind,
    Direction,
    ExecContext,
    Pose,
    PrimitiveAction,
    Scene,
    SceneFile,
    TOL,
    apply_primitive,
    overlap_iou3d,
    placement_valid,
)
from .concept_dsl import ConceptLibrary, MacroStep, Plan, PlanStep, PrimStep, plan_text
from .config_manager import SearchConfig
from .exceptions import CorpusError, NoObjectsLeftError, SearchStuckError
from .sketch_parser import GroundedSketch

logger = logging.getLogger(__name__)

_PRIMITIVE_ORDER = (KEEP, MOVES[Direction.LEFT], MOVES[Direction.RIGHT], MOVES[Direction.FRONT],
                    MOVES[Direction.BACK], MOVES[Direction.TOP], STORE, RESET)


# ---- 演示 ----

@dataclass(frozen=True)
class Transition:
    block_id: int
    target: Pose


class DemoFile(BaseModel):
    instruction: str
    keyframes: List[SceneFile]
    concept: Optional[str] = None
    size: Optional[int] = None


@dataclass(frozen=True)
class DemoTrace:
    """关键帧序列 S_1..S_g；相邻两帧之间恰好有一个方块改变位姿。"""
    instruction: str
    keyframes: Tuple[Scene, ...]
    diffs: Tuple[Transition, ...]
    concept: Optional[str] = None
    size: Optional[int] = None

    @classmethod
    def from_keyframes(cls, instruction: str, keyframes: Sequence[Scene],
                       concept: Optional[str] = None, size: Optional[int] = None) -> "DemoTrace":
        keyframes = tuple(keyframes)
        if len(keyframes) < 2:
            raise CorpusError("a demonstration needs at least two keyframes")
        diffs = []
        for t, (before, after) in enumerate(zip(keyframes, keyframes[1:])):
            if set(before.ids) != set(after.ids):
                raise CorpusError(f"keyframes {t} and {t + 1} contain different blocks")
            moved = [i for i in before.ids
                     if before.blocks[i].pose.rounded() != after.blocks[i].pose.rounded()]
            if len(moved) != 1:
                raise CorpusError(f"transition {t} moves {len(moved)} blocks, expected exactly one")
            diffs.append(Transition(moved[0], after.blocks[moved[0]].pose))
        return cls(instruction, keyframes, tuple(diffs), concept, size)

    @property
    def transitions(self) -> int:
        return len(self.diffs)

    @property
    def initial_scene(self) -> Scene:
        return self.keyframes[0]

    def to_dict(self) -> dict:
        data = {"instruction": self.instruction,
                "keyframes": [scene.to_dict() for scene in self.keyframes]}
        if self.concept is not None:
            data["concept"] = self.concept
        if self.size is not None:
            data["size"] = self.size
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DemoTrace":
        model = DemoFile.model_validate(data)
        return cls.from_keyframes(model.instruction,
                                  [Scene.from_file_model(k) for k in model.keyframes],
                                  model.concept, model.size)

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "DemoTrace":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def initial_context(demo: DemoTrace, grounded: GroundedSketch) -> ExecContext:
    """头部初始化在第一个转移的目标位姿上，计划因此总是以一次放置开始。"""
    return ExecContext(demo.initial_scene, demo.diffs[0].target, (), tuple(grounded.object_ids))


# ---- 边的执行结果 ----

@dataclass(frozen=True)
class EdgeOutcome:
    ctx: ExecContext
    kf_ptr: int
    total: float
    placement_rewards: Tuple[float, ...] = ()
    placed: int = 0


def _keep_outcome(ctx: ExecContext, kf_ptr: int, targets: Sequence[Pose]) -> EdgeOutcome:
    # 每次 keep 尝试都消耗一个转移；无效或不匹配的放置奖励为 0
    try:
        new_ctx, result = apply_primitive(ctx, KEEP)
    except NoObjectsLeftError:
        return EdgeOutcome(ctx, min(kf_ptr + 1, len(targets)), 0.0, (0.0,), 0)
    reward = 0.0
    if result.valid and kf_ptr < len(targets):
        reward = overlap_iou3d(result.cuboid, targets[kf_ptr])
    return EdgeOutcome(new_ctx, min(kf_ptr + 1, len(targets)), reward, (reward,), int(result.valid))


def macro_reward(ctx: ExecContext, kf_ptr: int, concept: str, size: int,
                 targets: Sequence[Pose], library: ConceptLibrary) -> EdgeOutcome:
    """
    从 ctx 执行 Make_<concept>(size)：每次放置与当前转移目标求 IoU 并推进 kf_ptr。
    返回的总奖励是边内的简单求和；调用结束后头部回到起点。
    """
    scene, remaining = ctx.scene, ctx.remaining
    head = ctx.head
    rewards = []
    placed = 0
    kf = kf_ptr
    placements = library.relative_placements(concept, size)
    for index, (dx, dy, dz) in enumerate(placements):
        if not remaining:
            # 方块用完后剩下的放置都得 0 分
            left = len(placements) - index
            rewards.extend([0.0] * left)
            kf = min(kf + left, len(targets))
            break
        reward = 0.0
        pose = Pose(head.x + dx, head.y + dy, head.z + dz)
        block_id = remaining[0]
        if placement_valid(scene, pose, ignore=(block_id,)).valid:
            scene = scene.with_pose(block_id, pose)
            remaining = remaining[1:]
            placed += 1
            if kf < len(targets):
                reward = overlap_iou3d(pose, targets[kf])
        rewards.append(reward)
        kf = min(kf + 1, len(targets))
    new_ctx = replace(ctx, scene=scene, remaining=remaining) if placed else ctx
    return EdgeOutcome(new_ctx, kf, float(sum(rewards)), tuple(rewards), placed)


def greedy_macro_size(ctx: ExecContext, kf_ptr: int, concept: str, targets: Sequence[Pose],
                      library: ConceptLibrary, max_size: Optional[int] = None) -> Tuple[int, EdgeOutcome]:
    """
    依次评估尺寸 1..max_size（默认为剩余转移数），返回总奖励最大的最小尺寸。

    只有总奖励达到剩余转移数时才提前停止，此时不可能再有更大的总奖励。
    更大尺寸的放置前缀可能与较小尺寸不同（例如 pyramid 的底行更长），所以放置数
    超过剩余转移数后仍继续评估。
    """
    remaining_transitions = max(len(targets) - kf_ptr, 1)
    max_size = max_size or remaining_transitions
    best: Optional[Tuple[int, EdgeOutcome]] = None
    for size in range(1, max_size + 1):
        if not library.relative_placements(concept, size):
            continue
        outcome = macro_reward(ctx, kf_ptr, concept, size, targets, library)
        if best is None or outcome.total > best[1].total + 1e-9:
            best = (size, outcome)
        if best[1].total >= remaining_transitions - 1e-9:
            break
    if best is None:
        best = (1, macro_reward(ctx, kf_ptr, concept, 1, targets, library))
    return best


def pruner_oracle(ctx: ExecContext, kf_ptr: int, targets: Sequence[Pose],
                  iou_threshold: float = 0.75) -> PrimitiveAction:
    """
    确定性几何剪枝器：头部已覆盖下一个目标就 keep，否则沿偏移最大的轴朝目标移动一格
    （并列时按 x、y、z 的顺序）。没有向下的方向，只剩向下偏移时退化为 keep。
    """
    if kf_ptr >= len(targets):
        raise SearchStuckError("pruner called after all keyframes were consumed")
    target = targets[kf_ptr]
    if overlap_iou3d(ctx.head, target) > iou_threshold:
        return KEEP
    dx, dy, dz = ctx.head.offset_to(target)
    options = [
        (abs(dx), 0, Direction.RIGHT if dx > 0 else Direction.LEFT),
        (abs(dy), 1, Direction.FRONT if dy > 0 else Direction.BACK),
    ]
    if dz > 0:
        options.append((dz, 2, Direction.TOP))
    magnitude, _, direction = max(options, key=lambda o: (o[0], -o[1]))
    if magnitude <= TOL:
        return KEEP
    return MOVES[direction]


# ---- 搜索树 ----

class SearchNode:
    __slots__ = ("ctx", "kf_ptr", "step", "parent", "depth", "reward", "placement_rewards", "placed",
                 "ret", "matched", "children", "q", "N", "V", "expanded", "terminal", "exhausted")

    def __init__(self, ctx: ExecContext, kf_ptr: int, step: Optional[PlanStep] = None,
                 parent: Optional["SearchNode"] = None, reward: float = 0.0,
                 placement_rewards: Tuple[float, ...] = (), placed: int = 0, gamma: float = 1.0):
        self.ctx = ctx
        self.kf_ptr = kf_ptr
        self.step = step
        self.parent = parent
        self.depth = 0 if parent is None else parent.depth + 1
        self.reward = reward
        self.placement_rewards = placement_rewards
        self.placed = placed
        # 从根到本节点的折扣回报和未折扣奖励
        self.ret = 0.0 if parent is None else parent.ret + (gamma ** parent.depth) * reward
        self.matched = 0.0 if parent is None else parent.matched + reward
        self.children: List["SearchNode"] = []
        self.q = reward
        self.N = 0
        self.V = 0.0
        self.expanded = False
        self.terminal = False
        self.exhausted = False

    def path(self) -> List["SearchNode"]:
        nodes = []
        node = self
        while node.parent is not None:
            nodes.append(node)
            node = node.parent
        return nodes[::-1]


def backup(node: SearchNode, gamma: float) -> None:
    """
    从 node 回溯到根：V(s) = max_a Q(s,a)，Q(s_t,a) = r_t + γ·V(s_{t+1})，沿途 N 加一。
    """
    while node is not None:
        node.N += 1
        node.V = max((c.q for c in node.children), default=0.0)
        if node.parent is not None:
            node.q = node.reward + gamma * node.V
        node = node.parent


@dataclass(frozen=True)
class PlanCandidate:
    plan: Plan
    ret: float
    step_rewards: Tuple[float, ...] = ()
    placement_rewards: Tuple[float, ...] = ()

    @property
    def total_reward(self) -> float:
        return float(sum(self.step_rewards))


@dataclass
class SearchResult:
    candidates: List[PlanCandidate] = field(default_factory=list)
    expansions: int = 0
    expansions_to_best: int = 0
    best_return: float = 0.0
    tree_size: int = 1


def _plan_key(plan: Sequence[PlanStep], ret: float) -> Tuple:
    return (-round(ret, 9), len(plan), tuple(step.sort_key for step in plan))


class PlanSearchEngine:
    """
    演示引导的 MCTS 计划搜索引擎。一次 search 对应一棵树，单线程写入。
    """

    def __init__(self, config: SearchConfig, logger: Optional[logging.Logger] = None):
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self._rng = np.random.default_rng(config.seed)

    # -- 动作集合 --

    def available_actions(self, node: SearchNode, library: ConceptLibrary,
                          targets: Sequence[Pose]) -> List[PlanStep]:
        return [step for step, _ in self._edges(node, library, targets)]

    def _edges(self, node: SearchNode, library: ConceptLibrary,
               targets: Sequence[Pose]) -> List[Tuple[PlanStep, EdgeOutcome]]:
        edges: List[Tuple[PlanStep, EdgeOutcome]] = []
        ctx, kf = node.ctx, node.kf_ptr
        if self.config.use_pruner:
            primitives = [pruner_oracle(ctx, kf, targets, self.config.iou_threshold)]
        else:
            primitives = [a for a in _PRIMITIVE_ORDER if a is not RESET or ctx.head_stack]
        for action in primitives:
            if action.kind is ActionKind.KEEP_AT_HEAD:
                outcome = _keep_outcome(ctx, kf, targets)
            else:
                new_ctx, _ = apply_primitive(ctx, action)
                outcome = EdgeOutcome(new_ctx, kf, 0.0)
            edges.append((PrimStep(action), outcome))
        if self.config.use_library:
            for concept in library.names:
                size, outcome = greedy_macro_size(ctx, kf, concept, targets, library)
                edges.append((MacroStep(concept, size), outcome))
        return edges

    # -- 主循环 --

    def search(self, demo: DemoTrace, grounded: GroundedSketch, library: ConceptLibrary) -> SearchResult:
        """
        在 budget 次扩展内搜索，返回按折扣回报排序的前 k 条计划。

        Raises:
            SearchStuckError: 根节点没有任何能产生放置的动作。
        """
        cfg = self.config
        if not grounded.object_ids:
            raise SearchStuckError("no grounded objects to place")
        targets = [d.target for d in demo.diffs]
        total = len(targets)
        active_library = library if cfg.use_library else ConceptLibrary()
        self._grounded_ids = tuple(grounded.object_ids)
        self._rng = np.random.default_rng(cfg.seed)

        root = SearchNode(initial_context(demo, grounded), 0, gamma=cfg.gamma)
        result = SearchResult()
        best_ret = -math.inf
        found_full = False
        self.logger.info("Plan search on '%s' (%d transitions, variant %s, budget %d)",
                         demo.instruction, total, cfg.variant, cfg.budget)

        while result.expansions < cfg.budget:
            node = self._select(root)
            if node is None:
                break
            self._expand(node, active_library, targets)
            result.expansions += 1
            result.tree_size += len(node.children)

            if node is root and not any(c.placed for c in root.children):
                raise SearchStuckError(f"no placement-yielding action at the root of '{demo.instruction}'")

            for child in node.children:
                if child.ret > best_ret + 1e-12:
                    best_ret = child.ret
                    result.expansions_to_best = result.expansions
                if child.kf_ptr == total and child.matched >= total - 1e-9:
                    found_full = True
            backup(node, cfg.gamma)

            if cfg.patience and found_full and result.expansions - result.expansions_to_best >= cfg.patience:
                self.logger.debug("Stopping early after %d expansions without improvement", cfg.patience)
                break

        result.best_return = max(best_ret, 0.0)
        result.candidates = self._top_k(root, cfg.k)
        if result.candidates:
            self.logger.info("Plan search finished: %d expansions, best return %.5f after %d, best plan: %s",
                             result.expansions, result.candidates[0].ret, result.expansions_to_best,
                             plan_text(result.candidates[0].plan))
        return result

    def _ucb(self, parent: SearchNode, child: SearchNode) -> float:
        return child.q + self.config.c_ucb * math.sqrt(math.log(parent.N + 1) / (child.N + 1))

    def _pick(self, parent: SearchNode, live: List[SearchNode]) -> SearchNode:
        """UCB 最大的子节点；并列时用 seed 决定的随机数选择。"""
        scores = [self._ucb(parent, c) for c in live]
        top = max(scores)
        tied = [c for c, s in zip(live, scores) if s >= top - 1e-12]
        if len(tied) == 1:
            return tied[0]
        return tied[int(self._rng.integers(len(tied)))]

    def _select(self, root: SearchNode) -> Optional[SearchNode]:
        while not root.exhausted:
            node = root
            while True:
                if node.terminal:
                    self._mark_exhausted(node)
                    break
                if not node.expanded:
                    return node
                live = [c for c in node.children if not c.exhausted]
                if not live:
                    self._mark_exhausted(node)
                    break
                node = self._pick(node, live)
        return None

    @staticmethod
    def _mark_exhausted(node: SearchNode) -> None:
        node.exhausted = True
        parent = node.parent
        while parent is not None and all(c.exhausted for c in parent.children):
            parent.exhausted = True
            parent = parent.parent

    def _state_key(self, outcome: EdgeOutcome) -> Tuple:
        ctx = outcome.ctx
        return (outcome.kf_ptr, ctx.head.rounded(), tuple(p.rounded() for p in ctx.head_stack),
                ctx.remaining, tuple(ctx.scene.blocks[b].pose.rounded() for b in self._grounded_ids))

    def _expand(self, node: SearchNode, library: ConceptLibrary, targets: Sequence[Pose]) -> None:
        seen: Dict[Tuple, int] = {}
        for step, outcome in self._edges(node, library, targets):
            # 零奖励的宏只会浪费转移
            if isinstance(step, MacroStep) and outcome.total <= 0.0:
                continue
            key = self._state_key(outcome)
            index = seen.get(key)
            # 到达同一状态的兄弟边只保留一条，宏边替换原语边
            if index is not None and not (isinstance(step, MacroStep)
                                          and isinstance(node.children[index].step, PrimStep)):
                continue
            child = SearchNode(outcome.ctx, outcome.kf_ptr, step, node, outcome.total,
                               outcome.placement_rewards, outcome.placed, self.config.gamma)
            child.terminal = child.kf_ptr >= len(targets) or child.depth >= self.config.max_depth
            child.exhausted = child.terminal
            if index is None:
                seen[key] = len(node.children)
                node.children.append(child)
            else:
                node.children[index] = child
        node.expanded = True
        if not node.children:
            self._mark_exhausted(node)

    def _top_k(self, root: SearchNode, k: int) -> List[PlanCandidate]:
        leaves = []
        stack = list(root.children)
        while stack:
            node = stack.pop()
            if node.children:
                stack.extend(node.children)
            else:
                leaves.append(node)

        best: Dict[Plan, PlanCandidate] = {}
        for leaf in leaves:
            path = leaf.path()
            # 末尾不产生放置的原语步骤对结果没有影响
            while path and isinstance(path[-1].step, PrimStep) and \
                    path[-1].step.action.kind is not ActionKind.KEEP_AT_HEAD:
                path.pop()
            if not path:
                continue
            plan = tuple(n.step for n in path)
            candidate = PlanCandidate(
                plan, path[-1].ret, tuple(n.reward for n in path),
                tuple(r for n in path for r in n.placement_rewards),
            )
            if plan not in best:
                best[plan] = candidate
        ranked = sorted(best.values(), key=lambda c: _plan_key(c.plan, c.ret))
        return ranked[:k]


def plan_search(demo: DemoTrace, grounded: GroundedSketch, library: ConceptLibrary,
                config: SearchConfig, logger: Optional[logging.Logger] = None) -> List[PlanCandidate]:
    return PlanSearchEngine(config, logger).search(demo, grounded, library).candidates


def replay_plan(plan: Sequence[PlanStep], demo: DemoTrace, grounded: GroundedSketch,
                library: ConceptLibrary, gamma: float = 0.95) -> PlanCandidate:
    """按搜索时的奖励语义重放计划，重新计算每步奖励、每次放置奖励和折扣回报。"""
    targets = [d.target for d in demo.diffs]
    ctx = initial_context(demo, grounded)
    kf = 0
    step_rewards, placement_rewards = [], []
    ret = 0.0
    for depth, step in enumerate(plan):
        if isinstance(step, MacroStep):
            outcome = macro_reward(ctx, kf, step.concept, step.size, targets, library)
        elif step.action.kind is ActionKind.KEEP_AT_HEAD:
            outcome = _keep_outcome(ctx, kf, targets)
        else:
            new_ctx, _ = apply_primitive(ctx, step.action)
            outcome = EdgeOutcome(new_ctx, kf, 0.0)
        ctx, kf = outcome.ctx, outcome.kf_ptr
        step_rewards.append(outcome.total)
        placement_rewards.extend(outcome.placement_rewards)
        ret += (gamma ** depth) * outcome.total
    return PlanCandidate(tuple(plan), ret, tuple(step_rewards), tuple(placement_rewards))
