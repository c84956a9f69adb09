import pytest

from spg_concept_learner.block_world import KEEP, MOVES, Direction, ExecContext, Pose, Scene
from spg_concept_learner.concept_dsl import KEEP_STEP, MOVE_STEPS, ConceptLibrary, MacroStep, parse_program_text
from spg_concept_learner.config_manager import SearchConfig
from spg_concept_learner.corpus_manager import GOLD_PROGRAM_TEXT
from spg_concept_learner.exceptions import CorpusError, SearchStuckError
from spg_concept_learner.plan_search_engine import (
    DemoTrace,
    PlanSearchEngine,
    SearchNode,
    backup,
    greedy_macro_size,
    initial_context,
    macro_reward,
    pruner_oracle,
    replay_plan,
)
from spg_concept_learner.sketch_parser import GroundedSketch

GAMMA = 0.95
TOWER_PRIMITIVE_RETURN = 1 + GAMMA ** 2 + GAMMA ** 4


def _grounded(demo):
    return GroundedSketch(demo.concept, demo.size, tuple(range(demo.transitions)))


def _targets(demo):
    return [d.target for d in demo.diffs]


def _labels(plan):
    return [step.label for step in plan]


class TestDemoTrace:
    def test_diffs(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        assert demo.transitions == 3
        assert demo.diffs[0].block_id == 0
        assert demo.diffs[2].target == Pose(10.5, 10.5, 2.5)

    def test_round_trip(self, tower_lib, make_demo, tmp_path):
        demo = make_demo("tower", 2, tower_lib)
        path = str(tmp_path / "demo.json")
        demo.dump(path)
        loaded = DemoTrace.load(path)
        assert loaded.diffs == demo.diffs
        assert loaded.instruction == demo.instruction
        assert loaded.size == 2

    def test_single_keyframe_rejected(self):
        with pytest.raises(CorpusError):
            DemoTrace.from_keyframes("x", [Scene()])

    def test_transition_must_move_one_block(self, tower_lib, make_demo):
        demo = make_demo("tower", 2, tower_lib)
        with pytest.raises(CorpusError, match="expected exactly one"):
            DemoTrace.from_keyframes(demo.instruction, [demo.keyframes[0], demo.keyframes[2]])


class TestRewards:
    def test_macro_of_right_size(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        ctx = initial_context(demo, _grounded(demo))
        outcome = macro_reward(ctx, 0, "tower", 3, _targets(demo), tower_lib)
        assert outcome.total == pytest.approx(3.0)
        assert outcome.kf_ptr == 3
        assert outcome.ctx.head == ctx.head

    def test_oversized_macro_leaves_last_placement_unmatched(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib, distractors=1)
        grounded = GroundedSketch("tower", 3, (0, 1, 2, 3))
        ctx = initial_context(demo, grounded)
        outcome = macro_reward(ctx, 0, "tower", 4, _targets(demo), tower_lib)
        assert outcome.total == pytest.approx(3.0)
        assert outcome.placement_rewards == (1.0, 1.0, 1.0, 0.0)

    def test_greedy_size(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        ctx = initial_context(demo, _grounded(demo))
        size, outcome = greedy_macro_size(ctx, 0, "tower", _targets(demo), tower_lib)
        assert size == 3
        assert outcome.total == pytest.approx(3.0)

    def test_greedy_size_scans_past_placement_count(self, gold_lib, make_demo):
        # pyramid(2) 已有 4 次放置但只匹配 3 个目标，pyramid(3) 的底行匹配全部 4 个
        demo = make_demo("row", 4, gold_lib)
        ctx = initial_context(demo, _grounded(demo))
        size, outcome = greedy_macro_size(ctx, 0, "pyramid", _targets(demo), gold_lib)
        assert size == 3
        assert outcome.total == pytest.approx(4.0)
        assert outcome.placement_rewards[:4] == (1.0, 1.0, 1.0, 1.0)
        assert len(outcome.placement_rewards) == 9
        assert outcome.kf_ptr == 4

    def test_replay_returns(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        grounded = _grounded(demo)
        primitive = (KEEP_STEP, MOVE_STEPS[Direction.TOP], KEEP_STEP, MOVE_STEPS[Direction.TOP], KEEP_STEP)
        assert replay_plan(primitive, demo, grounded, tower_lib).ret == pytest.approx(2.71700625)
        assert replay_plan((MacroStep("tower", 3),), demo, grounded, tower_lib).ret == pytest.approx(3.0)


class TestPruner:
    def _ctx(self, head):
        return ExecContext(Scene(), Pose(*head))

    def test_keep_on_target(self):
        assert pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 0, [Pose(5.5, 5.5, 0.5)]) == KEEP

    def test_largest_axis_first(self):
        assert pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 0, [Pose(7.5, 6.5, 0.5)]) == MOVES[Direction.RIGHT]
        assert pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 0, [Pose(5.5, 3.5, 0.5)]) == MOVES[Direction.BACK]
        assert pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 0, [Pose(5.5, 5.5, 2.5)]) == MOVES[Direction.TOP]

    def test_ties_prefer_x(self):
        assert pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 0, [Pose(4.5, 6.5, 0.5)]) == MOVES[Direction.LEFT]

    def test_no_downward_move(self):
        assert pruner_oracle(self._ctx((5.5, 5.5, 1.5)), 0, [Pose(5.5, 5.5, 0.5)]) == KEEP

    def test_after_last_keyframe(self):
        with pytest.raises(SearchStuckError):
            pruner_oracle(self._ctx((5.5, 5.5, 0.5)), 1, [Pose(5.5, 5.5, 0.5)])


def test_backup_chain():
    root = SearchNode(None, 0, gamma=GAMMA)
    parent = root
    chain = []
    for reward in (1.0, 0.0, 1.0):
        node = SearchNode(None, 0, KEEP_STEP, parent, reward, gamma=GAMMA)
        parent.children.append(node)
        chain.append(node)
        parent = node
    backup(chain[-1], GAMMA)
    assert root.V == pytest.approx(1.9025)
    assert chain[0].q == pytest.approx(1.9025)
    assert all(n.N == 1 for n in [root, *chain])


class TestSearch:
    def _config(self, variant, **overrides):
        return SearchConfig.for_variant(variant, patience=None, **overrides)

    def test_pruner_only_reproduces_tower(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        result = PlanSearchEngine(self._config("p")).search(demo, _grounded(demo), ConceptLibrary())
        best = result.candidates[0]
        assert _labels(best.plan) == ["keep_at_head", "move_head(top)", "keep_at_head",
                                      "move_head(top)", "keep_at_head"]
        assert best.ret == pytest.approx(TOWER_PRIMITIVE_RETURN)

    def test_macro_ranks_first(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        result = PlanSearchEngine(self._config("lp")).search(demo, _grounded(demo), tower_lib)
        assert _labels(result.candidates[0].plan) == ["Make_tower(3)"]
        assert result.candidates[0].ret == pytest.approx(3.0)
        assert result.best_return == pytest.approx(3.0)
        returns = [c.ret for c in result.candidates]
        assert returns == sorted(returns, reverse=True)
        assert any(c.ret == pytest.approx(TOWER_PRIMITIVE_RETURN) for c in result.candidates)

    def test_staircase_uses_tower_macros(self, tower_lib, make_demo):
        demo = make_demo("staircase", 3, _staircase_lib(tower_lib))
        result = PlanSearchEngine(self._config("lp")).search(demo, _grounded(demo), tower_lib)
        assert _labels(result.candidates[0].plan) == [
            "Make_tower(1)", "move_head(right)", "Make_tower(2)", "move_head(right)", "Make_tower(3)",
        ]
        assert result.candidates[0].ret == pytest.approx(1 + 2 * GAMMA ** 2 + 3 * GAMMA ** 4)

    def test_pruner_narrows_the_tree(self, tower_lib, make_demo):
        demo = make_demo("staircase", 3, _staircase_lib(tower_lib))
        optimum = 1 + 2 * GAMMA ** 2 + 3 * GAMMA ** 4
        runs = {variant: PlanSearchEngine(self._config(variant, budget=400)).search(demo, _grounded(demo), tower_lib)
                for variant in ("lp", "l")}
        pruned, unpruned = runs["lp"], runs["l"]
        assert pruned.best_return == pytest.approx(optimum)
        assert pruned.tree_size / pruned.expansions < unpruned.tree_size / unpruned.expansions
        if unpruned.best_return == pytest.approx(optimum):
            assert pruned.expansions_to_best <= unpruned.expansions_to_best

    def test_top_k_limit(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        result = PlanSearchEngine(self._config("lp", k=2)).search(demo, _grounded(demo), tower_lib)
        assert len(result.candidates) <= 2

    def test_budget_is_respected(self, tower_lib, make_demo):
        demo = make_demo("tower", 4, tower_lib)
        result = PlanSearchEngine(self._config("l", budget=7)).search(demo, _grounded(demo), tower_lib)
        assert result.expansions <= 7
        assert result.candidates

    def test_no_objects(self, tower_lib, make_demo):
        demo = make_demo("tower", 2, tower_lib)
        with pytest.raises(SearchStuckError):
            PlanSearchEngine(self._config("lp")).search(demo, GroundedSketch("tower", 2, ()), tower_lib)

    def test_seed_breaks_ucb_ties(self):
        root = SearchNode(None, 0)
        children = [SearchNode(None, 0, KEEP_STEP, root, 0.5) for _ in range(3)]
        engine = PlanSearchEngine(self._config("l", seed=3))
        picks = [engine._pick(root, children) for _ in range(60)]
        assert len({id(c) for c in picks}) > 1
        again = PlanSearchEngine(self._config("l", seed=3))
        assert [id(c) for c in picks] == [id(again._pick(root, children)) for _ in range(60)]
        children[1].q = 0.9
        assert all(engine._pick(root, children) is children[1] for _ in range(10))

    def test_same_seed_same_plans(self, tower_lib, make_demo):
        demo = make_demo("tower", 3, tower_lib)
        runs = [PlanSearchEngine(self._config("l", budget=40, seed=11)).search(demo, _grounded(demo), tower_lib)
                for _ in range(2)]
        assert [_labels(c.plan) for c in runs[0].candidates] == [_labels(c.plan) for c in runs[1].candidates]
        assert runs[0].expansions_to_best == runs[1].expansions_to_best

    def test_variant_names(self):
        assert SearchConfig.for_variant("l").variant == "l"
        with pytest.raises(ValueError):
            SearchConfig.for_variant("xyz")


def _staircase_lib(tower_lib):
    return tower_lib.register(parse_program_text(GOLD_PROGRAM_TEXT["staircase"]))
