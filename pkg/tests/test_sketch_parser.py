import pytest

from spg_concept_learner.block_world import Block, Direction, Pose, PrimitiveAction, Scene
from spg_concept_learner.concept_dsl import MOVE_STEPS, MacroStep, PrimStep, plan_text
from spg_concept_learner.exceptions import InstructionError, InsufficientObjectsError
from spg_concept_learner.sketch_parser import (
    Alternating,
    ConstrainedConstruct,
    Construct,
    DiffColorFrom,
    RelativeAnchor,
    RelativeMove,
    RelativePlacement,
    SameColorAs,
    SizeEquals,
    SizeQuery,
    TaskSketch,
    TotalCount,
    UnknownConcept,
    anchored_plan,
    build_sketch_prompt,
    ground_reference,
    ground_relative_move,
    ground_sketch,
    matching_ids,
    parse_attributes,
    parse_instruction,
    parse_sketch_call,
    relative_plan,
)

SAME_LEFT_DIFF_TOP = (
    "Construct a staircase of size 5 such that all blocks have the same color as the block to their left. "
    "No block should have the same color as the block on top of it."
)


def test_plain_construct(gold_lib):
    parsed = parse_instruction("Construct a tower of height 3 using yellow cubes", gold_lib)
    assert parsed == Construct(TaskSketch("tower", 3, ("yellow", "cube")))


def test_step_count_form(gold_lib):
    parsed = parse_instruction("Build a staircase of 4 steps with red legos", gold_lib)
    assert parsed == Construct(TaskSketch("staircase", 4, ("red", "lego")))


def test_size_query(gold_lib):
    parsed = parse_instruction("Find the size of the tower made of white dice", gold_lib)
    assert parsed == SizeQuery("tower", ("white", "dice"))


def test_same_left_and_different_top(gold_lib):
    parsed = parse_instruction(SAME_LEFT_DIFF_TOP, gold_lib)
    assert isinstance(parsed, ConstrainedConstruct)
    assert parsed.sketch == TaskSketch("staircase", 5, ("block",))
    assert parsed.clauses == (SameColorAs("left"), DiffColorFrom("top"))


def test_alternating_total(gold_lib):
    parsed = parse_instruction("Construct a tower of total 6 blocks using alternating blue and red blocks",
                               gold_lib)
    assert isinstance(parsed, ConstrainedConstruct)
    assert parsed.sketch.filter == ("block",)
    assert parsed.clauses == (Alternating(("blue", "red")), TotalCount(6))


def test_same_height_as_existing(gold_lib):
    parsed = parse_instruction(
        "Construct a tower of red cubes having the same height as the existing tower of white dice", gold_lib)
    assert isinstance(parsed, ConstrainedConstruct)
    assert parsed.sketch.filter == ("red", "cube")
    assert parsed.clauses == (SizeEquals(SizeQuery("tower", ("white", "dice"))),)


def test_unknown_concept_keeps_sketch(tower_lib):
    parsed = parse_instruction("Construct a spiral of size 3 using red cubes", tower_lib)
    assert parsed == UnknownConcept("spiral", TaskSketch("spiral", 3, ("red", "cube")))


def test_unparseable_instruction_lists_forms(gold_lib):
    with pytest.raises(InstructionError, match="Supported forms"):
        parse_instruction("stack some stuff please", gold_lib)


def test_missing_size(gold_lib):
    with pytest.raises(InstructionError, match="has no size"):
        parse_instruction("Construct a tower using red cubes", gold_lib)


def test_attributes_default_to_all_blocks():
    assert parse_attributes("of size 3") == ("block",)
    assert parse_attributes("green blocks") == ("green", "block")
    assert parse_attributes("red cube blocks") == ("red", "cube")


class TestGrounding:
    def _scene(self):
        return Scene.from_blocks([
            Block(5, "red", "cube", Pose(0.5, 0.5, 0.5)),
            Block(2, "red", "cube", Pose(2.5, 0.5, 0.5)),
            Block(3, "blue", "cube", Pose(4.5, 0.5, 0.5)),
            Block(7, "red", "dice", Pose(6.5, 0.5, 0.5)),
        ])

    def test_exact_match_in_id_order(self, gold_lib):
        grounded = ground_sketch(TaskSketch("tower", 2, ("red", "cube")), self._scene(), gold_lib)
        assert grounded.object_ids == (2, 5)

    def test_all_blocks_filter(self):
        assert matching_ids(self._scene(), ("block",)) == (2, 3, 5, 7)

    def test_insufficient_objects(self, gold_lib):
        with pytest.raises(InsufficientObjectsError) as info:
            ground_sketch(TaskSketch("tower", 3, ("red", "cube")), self._scene(), gold_lib)
        assert info.value.required == 3
        assert info.value.available == 2

    def test_required_override(self):
        with pytest.raises(InsufficientObjectsError):
            ground_sketch(TaskSketch("spiral", 2, ("blue",)), self._scene(), required=2)


class TestSketchCall:
    def test_parse(self):
        sketch = parse_sketch_call("Tower(height = 3, objects = filter(yellow, cubes))")
        assert sketch == TaskSketch("tower", 3, ("yellow", "cube"))

    def test_nested_filter_rejected(self):
        with pytest.raises(InstructionError, match="nested"):
            parse_sketch_call("Tower(3, filter(filter(yellow), cubes))")

    def test_no_call(self):
        with pytest.raises(InstructionError):
            parse_sketch_call("I cannot help with that")

    def test_prompt_lists_known_structures(self, tower_lib):
        prompt = build_sketch_prompt("Construct a tower of height 2 using red cubes", tower_lib)
        assert "Known structures: tower" in prompt
        assert prompt.rstrip().endswith("using red cubes")


def test_sketch_rejects_zero_size():
    with pytest.raises(InstructionError):
        TaskSketch("tower", 0, ("red",))


class TestRelativePlacement:
    def test_move_left_of(self, gold_lib):
        parsed = parse_instruction("Move the green block to the left of the red dice", gold_lib)
        assert parsed == RelativeMove((RelativePlacement(("green", "block"), Direction.LEFT, ("red", "dice")),))

    def test_chained_moves(self, gold_lib):
        parsed = parse_instruction(
            "Move the green block to the left of the red dice and the yellow block to the top of the green block",
            gold_lib,
        )
        assert [(p.object_filter, p.direction) for p in parsed.placements] == [
            (("green", "block"), Direction.LEFT), (("yellow", "block"), Direction.TOP),
        ]
        assert parsed.placements[1].reference_filter == ("green", "block")

    @pytest.mark.parametrize("phrase, direction", [
        ("in front of", Direction.FRONT),
        ("behind", Direction.BACK),
        ("on top of", Direction.TOP),
        ("to the right of", Direction.RIGHT),
    ])
    def test_direction_phrases(self, gold_lib, phrase, direction):
        parsed = parse_instruction(f"Put the blue cube {phrase} the white lego", gold_lib)
        assert parsed.placements[0].direction is direction
        assert parsed.placements[0].reference_filter == ("white", "lego")

    def test_bad_move_part(self, gold_lib):
        with pytest.raises(InstructionError):
            parse_instruction("Move the green block somewhere nice", gold_lib)

    def test_anchored_construct(self, gold_lib):
        parsed = parse_instruction("Construct a row of green legos of length 3 to the right of the blue block",
                                   gold_lib)
        assert parsed == Construct(TaskSketch("row", 3, ("green", "lego")),
                                   RelativeAnchor(Direction.RIGHT, ("blue", "block")))

    def test_anchor_with_constraints_rejected(self, gold_lib):
        with pytest.raises(InstructionError):
            parse_instruction("Construct a tower of total 4 blocks using alternating blue and red blocks "
                              "to the left of the green cube", gold_lib)

    def test_ground_move(self):
        scene = Scene.from_blocks([
            Block(0, "red", "dice", Pose(5.5, 5.5, 0.5)),
            Block(1, "green", "cube", Pose(10.5, 10.5, 0.5)),
            Block(2, "yellow", "cube", Pose(15.5, 3.5, 0.5)),
            Block(3, "green", "cube", Pose(15.5, 8.5, 0.5)),
        ])
        move = RelativeMove((
            RelativePlacement(("green", "block"), Direction.LEFT, ("red", "dice")),
            RelativePlacement(("yellow", "block"), Direction.TOP, ("green", "block")),
        ))
        steps = ground_relative_move(move, scene)
        # 第二步的参照物是刚搬过的 b1，而不是另一个绿色方块 b3
        assert steps == [(1, Direction.LEFT, 0), (2, Direction.TOP, 1)]
        plan, movers = relative_plan(steps)
        assert movers == (1, 2)
        assert plan_text(plan) == ("assign_head(0), move_head(left), keep_at_head, "
                                   "assign_head(1), move_head(top), keep_at_head")

    def test_ground_reference_missing(self):
        scene = Scene.from_blocks([Block(0, "red", "cube", Pose(0.5, 0.5, 0.5))])
        with pytest.raises(InsufficientObjectsError):
            ground_reference(scene, ("blue", "block"))
        with pytest.raises(InsufficientObjectsError):
            ground_reference(scene, ("red", "cube"), exclude=[0])

    def test_anchored_plan(self):
        plan = anchored_plan(TaskSketch("row", 3, ("green", "lego")), Direction.RIGHT, 4)
        assert plan == (PrimStep(PrimitiveAction.assign(4)), MOVE_STEPS[Direction.RIGHT], MacroStep("row", 3))
        assert plan_text(plan) == "assign_head(4), move_head(right), Make_row(3)"
