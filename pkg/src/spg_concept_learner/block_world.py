"""
确定性的方块世界：状态、原语动作语义、物理合理性检查以及立方体重叠几何。

所有方块都是边长 1.0 的单位立方体，位姿记录的是立方体中心。
桌面是 z = 0 平面上的轴对齐矩形，默认 [0,20]×[0,20]。
"""
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .exceptions import (
    EmptyHeadStackError,
    NoObjectsLeftError,
    TableFullError,
    WorldError,
)

logger = logging.getLogger(__name__)

TOL = 1e-6
DEFAULT_TABLE: Tuple[float, float, float, float] = (0.0, 0.0, 20.0, 20.0)
MAX_SAMPLE_ATTEMPTS = 10000


class Direction(str, Enum):
    """头部可移动的五个方向。front 为 +y，top 为 +z，没有 down。"""
    LEFT = "left"
    RIGHT = "right"
    FRONT = "front"
    BACK = "back"
    TOP = "top"

    @property
    def displacement(self) -> Tuple[float, float, float]:
        return _DISPLACEMENTS[self]

    @property
    def opposite(self) -> Optional["Direction"]:
        return _OPPOSITES.get(self)

    def __str__(self) -> str:
        return self.value


_DISPLACEMENTS = {
    Direction.LEFT: (-1.0, 0.0, 0.0),
    Direction.RIGHT: (1.0, 0.0, 0.0),
    Direction.FRONT: (0.0, 1.0, 0.0),
    Direction.BACK: (0.0, -1.0, 0.0),
    Direction.TOP: (0.0, 0.0, 1.0),
}

_OPPOSITES = {
    Direction.LEFT: Direction.RIGHT,
    Direction.RIGHT: Direction.LEFT,
    Direction.FRONT: Direction.BACK,
    Direction.BACK: Direction.FRONT,
}


class Pose(NamedTuple):
    """立方体中心坐标，单位为方块边长。"""
    x: float
    y: float
    z: float

    def moved(self, direction: Direction) -> "Pose":
        dx, dy, dz = direction.displacement
        return Pose(self.x + dx, self.y + dy, self.z + dz)

    def translated(self, dx: float, dy: float, dz: float) -> "Pose":
        return Pose(self.x + dx, self.y + dy, self.z + dz)

    def offset_to(self, other: "Pose") -> Tuple[float, float, float]:
        return other.x - self.x, other.y - self.y, other.z - self.z

    def rounded(self, ndigits: int = 6) -> Tuple[float, float, float]:
        # +0.0 把 -0.0 归一，避免同一位置得到两个键
        return (round(self.x, ndigits) + 0.0, round(self.y, ndigits) + 0.0,
                round(self.z, ndigits) + 0.0)


# 头部就是一个单位立方体，只需要中心
Head = Pose


class BBox5(NamedTuple):
    """图像平面包围盒 (x1, y1, x2, y2) 加上中心深度 d。"""
    x1: float
    y1: float
    x2: float
    y2: float
    d: float


@dataclass(frozen=True)
class Block:
    id: int
    color: str
    shape: str
    pose: Pose

    @property
    def attributes(self) -> frozenset:
        # "block" 是所有方块共有的属性，过滤条件里的 "blocks" 匹配全部方块
        return frozenset((self.color, self.shape, "block"))

    def moved_to(self, pose: Pose) -> "Block":
        return replace(self, pose=pose)


# ---- 场景文件模型 ----

class BlockRecord(BaseModel):
    id: int
    color: str
    shape: str
    pose: Tuple[float, float, float]


class SceneFile(BaseModel):
    table: Tuple[float, float, float, float] = DEFAULT_TABLE
    blocks: List[BlockRecord] = Field(default_factory=list)

    @field_validator("blocks")
    @classmethod
    def _unique_ids(cls, blocks):
        ids = [b.id for b in blocks]
        if len(ids) != len(set(ids)):
            raise ValueError("方块 id 必须唯一")
        return blocks


@dataclass(frozen=True)
class Scene:
    """不可变的场景值。修改操作都返回新场景。"""
    blocks: Dict[int, Block] = field(default_factory=dict)
    table_extent: Tuple[float, float, float, float] = DEFAULT_TABLE

    @classmethod
    def from_blocks(cls, blocks: Iterable[Block],
                    table_extent: Tuple[float, float, float, float] = DEFAULT_TABLE) -> "Scene":
        block_map: Dict[int, Block] = {}
        for block in blocks:
            if block.id in block_map:
                raise WorldError(f"duplicate block id {block.id}")
            block_map[block.id] = block
        return cls(dict(sorted(block_map.items())), tuple(table_extent))

    @property
    def ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.blocks))

    def __len__(self) -> int:
        return len(self.blocks)

    def __contains__(self, block_id: int) -> bool:
        return block_id in self.blocks

    def block(self, block_id: int) -> Block:
        try:
            return self.blocks[block_id]
        except KeyError:
            raise WorldError(f"unknown block id {block_id}") from None

    def with_block(self, block: Block) -> "Scene":
        blocks = dict(self.blocks)
        blocks[block.id] = block
        return Scene(blocks, self.table_extent)

    def with_pose(self, block_id: int, pose: Pose) -> "Scene":
        return self.with_block(self.block(block_id).moved_to(pose))

    @cached_property
    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(ids, centers) 两个 numpy 数组，按 id 升序；用于向量化几何计算。"""
        ids = np.array(self.ids, dtype=np.int64)
        if len(ids) == 0:
            return ids, np.zeros((0, 3), dtype=float)
        centers = np.array([self.blocks[i].pose for i in ids], dtype=float)
        return ids, centers

    def check_invariants(self) -> List[str]:
        """返回违反“无重叠、有支撑”约束的描述列表；空列表表示场景合法。"""
        problems = []
        for block_id in self.ids:
            check = placement_valid(self, self.blocks[block_id].pose, ignore=(block_id,))
            if not check.collision_free:
                problems.append(f"block {block_id} overlaps another block")
            if not check.supported:
                problems.append(f"block {block_id} is not supported")
        return problems

    # ---- 文件读写 ----

    def to_file_model(self) -> SceneFile:
        return SceneFile(
            table=self.table_extent,
            blocks=[BlockRecord(id=b.id, color=b.color, shape=b.shape, pose=tuple(b.pose))
                    for b in (self.blocks[i] for i in self.ids)],
        )

    def to_dict(self) -> dict:
        data = self.to_file_model().model_dump()
        data["table"] = list(data["table"])
        for record in data["blocks"]:
            record["pose"] = list(record["pose"])
        return data

    @classmethod
    def from_file_model(cls, model: SceneFile) -> "Scene":
        return cls.from_blocks(
            (Block(r.id, r.color, r.shape, Pose(*r.pose)) for r in model.blocks),
            model.table,
        )

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls.from_file_model(SceneFile.model_validate(data))

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> "Scene":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class ExecContext:
    """执行上下文：场景、头部、头部栈和待放置方块列表。值类型，可随意复制。"""
    scene: Scene
    head: Pose
    head_stack: Tuple[Pose, ...] = ()
    remaining: Tuple[int, ...] = ()

    def __post_init__(self):
        if len(set(self.remaining)) != len(self.remaining):
            raise WorldError("remaining ids must be distinct")


class ActionKind(str, Enum):
    MOVE_HEAD = "move_head"
    ASSIGN_HEAD = "assign_head"
    KEEP_AT_HEAD = "keep_at_head"
    STORE_HEAD = "store_head"
    RESET_HEAD = "reset_head"


_KIND_ORDER = {
    ActionKind.KEEP_AT_HEAD: 0,
    ActionKind.MOVE_HEAD: 1,
    ActionKind.STORE_HEAD: 2,
    ActionKind.RESET_HEAD: 3,
    ActionKind.ASSIGN_HEAD: 4,
}


@dataclass(frozen=True)
class PrimitiveAction:
    kind: ActionKind
    direction: Optional[Direction] = None
    block_id: Optional[int] = None

    @classmethod
    def move(cls, direction: Union[Direction, str]) -> "PrimitiveAction":
        return cls(ActionKind.MOVE_HEAD, direction=Direction(direction))

    @classmethod
    def assign(cls, block_id: int) -> "PrimitiveAction":
        return cls(ActionKind.ASSIGN_HEAD, block_id=block_id)

    @property
    def label(self) -> str:
        if self.kind is ActionKind.MOVE_HEAD:
            return f"move_head({self.direction.value})"
        if self.kind is ActionKind.ASSIGN_HEAD:
            return f"assign_head({self.block_id})"
        return self.kind.value

    @property
    def sort_key(self) -> Tuple:
        return (_KIND_ORDER[self.kind],
                self.direction.value if self.direction else "",
                self.block_id if self.block_id is not None else -1)

    def __str__(self) -> str:
        return self.label


KEEP = PrimitiveAction(ActionKind.KEEP_AT_HEAD)
STORE = PrimitiveAction(ActionKind.STORE_HEAD)
RESET = PrimitiveAction(ActionKind.RESET_HEAD)
MOVES = {d: PrimitiveAction.move(d) for d in Direction}


class PlacementCheck(NamedTuple):
    collision_free: bool
    supported: bool

    @property
    def valid(self) -> bool:
        return self.collision_free and self.supported


@dataclass(frozen=True)
class PlacementResult:
    valid: bool
    block_id: int
    cuboid: Pose
    collision_free: bool
    supported: bool


# ---- 几何 ----

def intersection_volumes(center: Sequence[float], centers: np.ndarray) -> np.ndarray:
    """一个单位立方体与一组单位立方体的交集体积。"""
    if len(centers) == 0:
        return np.zeros(0, dtype=float)
    overlap = np.clip(1.0 - np.abs(np.asarray(centers, dtype=float) - np.asarray(center, dtype=float)),
                      0.0, None)
    return np.prod(overlap, axis=-1)


def iou_from_intersection(intersection):
    # 两个单位立方体: union = 1 + 1 - inter
    return intersection / (2.0 - intersection)


def overlap_iou3d(a: Sequence[float], b: Sequence[float]) -> float:
    """两个单位立方体（以中心给出）的三维 IoU，取值 [0,1]，对称。"""
    inter = 1.0
    for ca, cb in zip(a, b):
        side = 1.0 - abs(ca - cb)
        if side <= 0.0:
            return 0.0
        inter *= side
    return inter / (2.0 - inter)


def pairwise_iou3d(centers_a: np.ndarray, centers_b: np.ndarray) -> np.ndarray:
    """两组立方体中心的 IoU 矩阵，形状 [len(a), len(b)]。"""
    a = np.asarray(centers_a, dtype=float).reshape(-1, 3)
    b = np.asarray(centers_b, dtype=float).reshape(-1, 3)
    overlap = np.clip(1.0 - np.abs(a[:, None, :] - b[None, :, :]), 0.0, None)
    return iou_from_intersection(np.prod(overlap, axis=2))


def render_bbox(item: Union[Block, Pose]) -> BBox5:
    """投影到图像平面：x 对应世界 x，图像纵轴对应世界 z，深度取世界 y。"""
    pose = item.pose if isinstance(item, Block) else item
    return BBox5(pose.x - 0.5, pose.z - 0.5, pose.x + 0.5, pose.z + 0.5, pose.y)


def bbox_iou2d(a: BBox5, b: BBox5) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


# ---- 物理合理性 ----

def _others(scene: Scene, ignore: Iterable[int]) -> np.ndarray:
    ids, centers = scene.arrays
    ignore = tuple(ignore)
    if not ignore or len(ids) == 0:
        return centers
    return centers[~np.isin(ids, ignore)]


def _on_table(scene: Scene, cuboid: Pose) -> bool:
    x_min, y_min, x_max, y_max = scene.table_extent
    return (abs(cuboid.z - 0.5) <= TOL
            and cuboid.x - 0.5 >= x_min - TOL and cuboid.x + 0.5 <= x_max + TOL
            and cuboid.y - 0.5 >= y_min - TOL and cuboid.y + 0.5 <= y_max + TOL)


def placement_valid(scene: Scene, cuboid: Sequence[float], ignore: Iterable[int] = ()) -> PlacementCheck:
    """
    检查把单位立方体放在 cuboid 处是否无碰撞且有支撑。

    支撑只接受两种情况：底面贴桌面且投影在桌面内；或者正下方有一个方块，
    其顶面与立方体底面重合且 (x, y) 中心对齐。

    Args:
        scene: 当前场景。
        cuboid: 立方体中心。
        ignore: 不参与检查的方块 id（例如正在被搬动的方块本身）。
    """
    cuboid = Pose(*cuboid)
    centers = _others(scene, ignore)
    inter = intersection_volumes(cuboid, centers)
    collision_free = bool(inter.size == 0 or inter.max() <= TOL)

    supported = _on_table(scene, cuboid)
    if not supported and len(centers):
        below = ((np.abs(centers[:, 0] - cuboid.x) <= TOL)
                 & (np.abs(centers[:, 1] - cuboid.y) <= TOL)
                 & (np.abs(centers[:, 2] + 1.0 - cuboid.z) <= TOL))
        supported = bool(below.any())
    return PlacementCheck(collision_free, supported)


def is_clear(scene: Scene, block_id: int, direction: Direction, ignore: Iterable[int] = ()) -> bool:
    """方块在 direction 方向上相邻的单元格是否空闲。"""
    side = scene.block(block_id).pose.moved(Direction(direction))
    inter = intersection_volumes(side, _others(scene, (block_id, *ignore)))
    return bool(inter.size == 0 or inter.max() <= TOL)


def sample_free_position(scene: Scene, rng: np.random.Generator,
                         max_attempts: int = MAX_SAMPLE_ATTEMPTS,
                         ignore: Iterable[int] = ()) -> Pose:
    """
    在桌面上均匀拒绝采样一个空闲位置，位置对齐到单位网格单元中心。

    Raises:
        TableFullError: 尝试 max_attempts 次仍未找到空位。
    """
    x_min, y_min, x_max, y_max = scene.table_extent
    nx, ny = int(np.floor(x_max - x_min + TOL)), int(np.floor(y_max - y_min + TOL))
    ignore = tuple(ignore)
    for _ in range(max_attempts):
        i, j = rng.integers(nx), rng.integers(ny)
        pose = Pose(x_min + float(i) + 0.5, y_min + float(j) + 0.5, 0.5)
        if placement_valid(scene, pose, ignore=ignore).valid:
            return pose
    raise TableFullError(max_attempts)


# ---- 原语动作 ----

def apply_primitive(ctx: ExecContext, action: PrimitiveAction) -> Tuple[ExecContext, Optional[PlacementResult]]:
    """
    执行一个原语动作。只有 keep_at_head 返回 PlacementResult。

    Raises:
        EmptyHeadStackError: 栈为空时 reset_head。
        NoObjectsLeftError: remaining 为空时 keep_at_head。
        WorldError: assign_head 引用了不存在的方块。
    """
    kind = action.kind
    if kind is ActionKind.MOVE_HEAD:
        return replace(ctx, head=ctx.head.moved(action.direction)), None
    if kind is ActionKind.ASSIGN_HEAD:
        return replace(ctx, head=ctx.scene.block(action.block_id).pose), None
    if kind is ActionKind.STORE_HEAD:
        return replace(ctx, head_stack=ctx.head_stack + (ctx.head,)), None
    if kind is ActionKind.RESET_HEAD:
        if not ctx.head_stack:
            raise EmptyHeadStackError()
        return replace(ctx, head=ctx.head_stack[-1], head_stack=ctx.head_stack[:-1]), None
    if kind is ActionKind.KEEP_AT_HEAD:
        if not ctx.remaining:
            raise NoObjectsLeftError()
        block_id = ctx.remaining[0]
        check = placement_valid(ctx.scene, ctx.head, ignore=(block_id,))
        result = PlacementResult(check.valid, block_id, ctx.head, check.collision_free, check.supported)
        if not check.valid:
            # 无效放置不修改场景，也不消耗方块
            return ctx, result
        scene = ctx.scene.with_pose(block_id, ctx.head)
        return replace(ctx, scene=scene, remaining=ctx.remaining[1:]), result
    raise WorldError(f"unsupported primitive action {action!r}")
