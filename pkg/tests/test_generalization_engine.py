import pytest

from spg_concept_learner.block_world import Direction
from spg_concept_learner.concept_dsl import (
    KEEP_STEP,
    MOVE_STEPS,
    ConceptLibrary,
    MacroStep,
    SizeExpr,
    emit_program_text,
    parse_program_text,
)
from spg_concept_learner.config_manager import GeneralizeConfig
from spg_concept_learner.corpus_manager import GOLD_PROGRAM_TEXT
from spg_concept_learner.evaluation_engine import program_accuracy
from spg_concept_learner.exceptions import GeneralizationError
from spg_concept_learner.generalization_engine import (
    BundleEntry,
    CandidateProgram,
    DemoBundle,
    GeneralizationEngine,
    build_bundles,
    build_generalization_prompt,
    canonical_plan,
    extract_program_text,
    fit_affine,
    generalize_via_backend,
    parse_backend_candidates,
    score_program,
    segment_plan,
    select_best,
    synthesize,
    validate_program,
)
from spg_concept_learner.plan_search_engine import replay_plan
from spg_concept_learner.sketch_parser import GroundedSketch

TOP = MOVE_STEPS[Direction.TOP]
RIGHT = MOVE_STEPS[Direction.RIGHT]


def _tower_plan(n):
    return (KEEP_STEP, TOP) * (n - 1) + (KEEP_STEP,)


def _staircase_plan(n):
    plan = [KEEP_STEP]
    for size in range(2, n + 1):
        plan += [RIGHT, MacroStep("tower", size)]
    return tuple(plan)


def _bundle(concept, plans, demo_library, plan_library, make_demo):
    entries = []
    for n, plan in plans.items():
        demo = make_demo(concept, n, demo_library)
        grounded = GroundedSketch(concept, n, tuple(range(demo.transitions)))
        entries.append(BundleEntry(demo, grounded, replay_plan(plan, demo, grounded, plan_library)))
    return DemoBundle(concept, tuple(entries))


@pytest.fixture
def staircase_lib(tower_lib):
    return tower_lib.register(parse_program_text(GOLD_PROGRAM_TEXT["staircase"]))


class TestFitAffine:
    def test_linear_in_n(self):
        assert fit_affine([(3, 0, 3), (4, 0, 4), (5, 0, 5)]) == SizeExpr(0, 1, 0)

    def test_prefers_constant(self):
        assert fit_affine([(3, 0, 2), (5, 0, 2)]) == SizeExpr(2, 0, 0)

    def test_single_size_uses_index(self):
        # 只有 n=3 的数据时，最少自由度的解是 5 - 2i
        assert fit_affine([(3, 0, 5), (3, 1, 3), (3, 2, 1)]) == SizeExpr(5, 0, -2)

    def test_pyramid_rows(self):
        observations = [(n, i, 2 * n - 2 * i - 1) for n in (3, 4, 5) for i in range(n)]
        assert fit_affine(observations) == SizeExpr(-1, 2, -2)

    def test_non_affine(self):
        assert fit_affine([(1, 0, 1), (2, 0, 2), (3, 0, 4)]) is None

    def test_index_disallowed(self):
        assert fit_affine([(3, 0, 1), (3, 1, 2)], allow_index=False) is None

    def test_empty(self):
        assert fit_affine([]) is None


def test_canonical_plan_rewrites_unit_macros(tower_lib):
    plan = (MacroStep("tower", 1), RIGHT, MacroStep("tower", 2))
    assert canonical_plan(plan, tower_lib) == (KEEP_STEP, RIGHT, MacroStep("tower", 2))


def test_segment_compresses_runs():
    plan = (KEEP_STEP, RIGHT, RIGHT, TOP, KEEP_STEP)
    tokens = segment_plan(plan, compress_runs=True)
    assert [(t.kind, t.name, t.value) for t in tokens] == [
        ("prim", "keep_at_head", 0), ("run", "right", 2), ("run", "top", 1), ("prim", "keep_at_head", 0),
    ]


class TestSynthesis:
    def test_tower_from_primitive_plans(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4, 5)}, tower_lib, ConceptLibrary(), make_demo)
        library = ConceptLibrary()
        candidates = synthesize(bundle, library)
        assert candidates
        assert all(validate_program(c.program, bundle, library) for c in candidates)
        best = select_best(candidates, bundle, library)
        assert best.text == "(def tower (n) (loop n :trim 1 (keep) (move top)))"
        assert program_accuracy(best.program, parse_program_text(GOLD_PROGRAM_TEXT["tower"]), library) == 1

    def test_staircase_from_macro_plans(self, tower_lib, staircase_lib, make_demo):
        bundle = _bundle("staircase", {n: _staircase_plan(n) for n in (3, 4)}, staircase_lib, tower_lib,
                         make_demo)
        engine = GeneralizationEngine(GeneralizeConfig())
        pool = engine.candidate_pool([bundle], tower_lib)
        best = select_best(pool, bundle, tower_lib)
        assert best.text == "(def staircase (n) (loop n :trim 1 (call tower (+ i 1)) (move right)))"
        learned = tower_lib.register(best.program)
        gold = staircase_lib.get("staircase")
        assert program_accuracy(best.program, gold, learned, gold_lib=staircase_lib) == 1

    def test_attempts_are_deterministic(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4)}, tower_lib, ConceptLibrary(), make_demo)
        engine = GeneralizationEngine(GeneralizeConfig(seed=7))
        first = [c.text for c in engine.synthesize(bundle, ConceptLibrary(), attempt=2)]
        second = [c.text for c in engine.synthesize(bundle, ConceptLibrary(), attempt=2)]
        assert first == second

    def test_candidate_cap(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4)}, tower_lib, ConceptLibrary(), make_demo)
        engine = GeneralizationEngine(GeneralizeConfig(max_candidates_per_attempt=1))
        assert len(engine.synthesize(bundle, ConceptLibrary())) == 1

    def test_wrong_program_does_not_validate(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4)}, tower_lib, ConceptLibrary(), make_demo)
        row = parse_program_text("(def tower (n) (loop n :trim 1 (keep) (move right)))")
        assert not validate_program(row, bundle, ConceptLibrary())

    def test_select_best_prefers_higher_score(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4)}, tower_lib, ConceptLibrary(), make_demo)
        wrong = CandidateProgram(parse_program_text("(def tower (n) (loop n (keep) (move right)))"), "backend")
        right = CandidateProgram(parse_program_text("(def tower (n) (loop (+ n -1) (keep) (move top)) (keep))"),
                                 "offline:loop")
        assert select_best([wrong, right], bundle, ConceptLibrary()) is right

    def test_world_failures_score_zero(self, tower_lib, make_demo):
        bundle = _bundle("tower", {n: _tower_plan(n) for n in (3, 4, 5)}, tower_lib, ConceptLibrary(), make_demo)
        library = ConceptLibrary()
        broken = parse_backend_candidates(["(def tower (n) (reset))"], bundle, library)
        assert len(broken) == 1
        assert score_program(broken[0].program, bundle, library) == 0.0
        best = select_best(synthesize(bundle, library) + broken, bundle, library)
        assert best.source.startswith("offline")
        assert best.text == "(def tower (n) (loop n :trim 1 (keep) (move top)))"

    def test_empty_pool(self, tower_lib, make_demo):
        bundle = _bundle("tower", {3: _tower_plan(3)}, tower_lib, ConceptLibrary(), make_demo)
        with pytest.raises(GeneralizationError):
            select_best([], bundle, ConceptLibrary())

    def test_empty_bundle(self):
        with pytest.raises(GeneralizationError):
            DemoBundle("tower", ())


def test_build_bundles_by_rank(tower_lib, make_demo):
    demo = make_demo("tower", 3, tower_lib)
    grounded = GroundedSketch("tower", 3, (0, 1, 2))
    first = replay_plan(_tower_plan(3), demo, grounded, tower_lib)
    second = replay_plan((MacroStep("tower", 3),), demo, grounded, tower_lib)
    bundles = build_bundles("tower", [(demo, grounded, [first, second]), (demo, grounded, [first])], k=3)
    assert len(bundles) == 2
    assert bundles[1].entries[0].candidate is second
    assert bundles[1].entries[1].candidate is first
    assert build_bundles("tower", [(demo, grounded, [])], k=3) == []


class TestBackendCandidates:
    def test_extract_full_definition(self):
        text = "Here it is: (def tower (n) (loop n (keep) (move top))) done"
        assert extract_program_text(text, "tower") == "(def tower (n) (loop n (keep) (move top)))"

    def test_extract_continuation(self):
        assert extract_program_text("(loop n (keep) (move top)))", "tower") == \
            "(def tower (n) (loop n (keep) (move top)))"

    def test_unbalanced(self):
        assert extract_program_text("(def tower (n) (loop n", "tower") is None

    def test_parse_filters_bad_completions(self, tower_lib, make_demo):
        bundle = _bundle("tower", {3: _tower_plan(3)}, tower_lib, ConceptLibrary(), make_demo)
        completions = [
            "(def foo (n) (loop n (keep) (move top)))",
            "(def bar (n) (call spiral n))",
            "(def baz (n) (move sideways))",
        ]
        candidates = parse_backend_candidates(completions, bundle, ConceptLibrary())
        assert len(candidates) == 1
        assert candidates[0].program.name == "tower"
        assert candidates[0].source == "backend"

    def test_prompt_contains_traces(self, tower_lib, make_demo):
        bundle = _bundle("tower", {3: _tower_plan(3)}, tower_lib, ConceptLibrary(), make_demo)
        prompt = build_generalization_prompt(bundle, tower_lib)
        assert "tower(size = 3, objects = ObjSet_1)" in prompt
        assert "move_head(dir = top)" in prompt
        assert emit_program_text(tower_lib.get("tower")) in prompt
        assert prompt.endswith("(def tower (n)")


class _FakeBackend:
    enabled = True

    def __init__(self, completions):
        self.completions = completions
        self.prompts = []

    async def complete(self, prompt, n=None):
        self.prompts.append(prompt)
        return list(self.completions)


@pytest.mark.asyncio
async def test_generalize_via_backend(tower_lib, make_demo):
    bundle = _bundle("tower", {3: _tower_plan(3)}, tower_lib, ConceptLibrary(), make_demo)
    backend = _FakeBackend(["(loop n (keep) (move top)))"])
    candidates = await generalize_via_backend(bundle, ConceptLibrary(), backend, rank=1)
    assert [c.text for c in candidates] == ["(def tower (n) (loop n (keep) (move top)))"]
    assert candidates[0].rank == 1
    assert len(backend.prompts) == 1


@pytest.mark.asyncio
async def test_generalize_without_backend(tower_lib, make_demo):
    bundle = _bundle("tower", {3: _tower_plan(3)}, tower_lib, ConceptLibrary(), make_demo)
    assert await generalize_via_backend(bundle, ConceptLibrary(), None) == []
