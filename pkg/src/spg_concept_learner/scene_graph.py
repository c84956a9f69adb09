"""
场景图：从场景中提取方向关系，以及回答“结构有多大”的查询。

关系 dir(subject, object) 的含义是 subject 位于 object 的 dir 方向：
把想象中的头部放在 object 上、沿 dir 移动一格，若与 subject 的三维 IoU 超过阈值则成立。
"""
import logging
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .block_world import Direction, Scene, overlap_iou3d, pairwise_iou3d
from .concept_dsl import ConceptLibrary
from .exceptions import WorldError

logger = logging.getLogger(__name__)

RELATION_IOU_THRESHOLD = 0.75


class Relation(NamedTuple):
    direction: Direction
    subject: int
    object: int

    def __str__(self) -> str:
        return f"{self.direction.value}({self.subject},{self.object})"


@dataclass(frozen=True)
class SceneGraph:
    relations: FrozenSet[Relation] = frozenset()

    def __len__(self) -> int:
        return len(self.relations)

    def __contains__(self, relation: Relation) -> bool:
        return relation in self.relations

    def restricted(self, ids: Iterable[int]) -> "SceneGraph":
        ids = set(ids)
        return SceneGraph(frozenset(r for r in self.relations if r.subject in ids and r.object in ids))

    def lines(self) -> List[str]:
        return sorted(str(r) for r in self.relations)

    def involving(self, block_id: int) -> List[Relation]:
        return [r for r in self.relations if block_id in (r.subject, r.object)]


def holds_relation(scene: Scene, subject: int, obj: int, direction: Direction,
                   threshold: float = RELATION_IOU_THRESHOLD) -> bool:
    if subject == obj:
        raise WorldError(f"relation needs two distinct blocks, got {subject} twice")
    head = scene.block(obj).pose.moved(Direction(direction))
    return overlap_iou3d(head, scene.block(subject).pose) > threshold


def extract_scene_graph(scene: Scene, ids: Optional[Iterable[int]] = None,
                        threshold: float = RELATION_IOU_THRESHOLD) -> SceneGraph:
    """对 ids 内所有有序方块对和五个方向求关系（向量化实现）。ids 为 None 时取全部方块。"""
    ids = sorted(scene.ids if ids is None else set(ids))
    if len(ids) < 2:
        return SceneGraph()
    centers = np.array([scene.block(i).pose for i in ids], dtype=float)
    relations = set()
    for direction in Direction:
        heads = centers + np.asarray(direction.displacement)
        # iou[s, o]: subject s 与 object o 沿该方向移动一格后的位置
        iou = pairwise_iou3d(centers, heads)
        np.fill_diagonal(iou, 0.0)
        for s, o in zip(*np.nonzero(iou > threshold)):
            relations.add(Relation(direction, ids[s], ids[o]))
    return SceneGraph(frozenset(relations))


def find_size(scene: Scene, concept: str, objects: Sequence[int], library: ConceptLibrary,
              threshold: float = RELATION_IOU_THRESHOLD) -> int:
    """
    以每个候选方块为锚点想象构造 concept 的 1, 2, … 尺寸，
    每个想象放置都必须对应一个不同的已有方块，返回能实现的最大尺寸；没有则返回 0。

    Raises:
        LibraryError: concept 不在库中。
    """
    library.get(concept)
    objects = list(objects)
    if not objects:
        return 0
    centers = np.array([scene.block(i).pose for i in objects], dtype=float)
    best = 0
    for anchor_id in objects:
        anchor = scene.block(anchor_id).pose
        for size in range(best + 1, len(objects) + 1):
            offsets = library.relative_placements(concept, size)
            if not offsets or len(offsets) > len(objects):
                continue
            imagined = np.asarray(offsets, dtype=float) + np.asarray(anchor, dtype=float)
            iou = pairwise_iou3d(imagined, centers)
            matched = iou.argmax(axis=1)
            if np.all(iou[np.arange(len(imagined)), matched] > threshold) \
                    and len(set(matched.tolist())) == len(imagined):
                best = size
    logger.debug("find_size(%s) over %d objects -> %d", concept, len(objects), best)
    return best
