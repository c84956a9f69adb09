import logging
from dataclasses import replace

import pytest

from spg_concept_learner.concept_dsl import ConceptLibrary, emit_program_text
from spg_concept_learner.concept_learner import ConceptLearner
from spg_concept_learner.config_manager import AppConfig, GeneralizeConfig, SearchConfig
from spg_concept_learner.corpus_manager import gold_library
from spg_concept_learner.evaluation_engine import program_accuracy
from spg_concept_learner.exceptions import InstructionError
from spg_concept_learner.sketch_parser import TaskSketch

TOWER_TEXT = "(def tower (n) (loop n :trim 1 (keep) (move top)))"


class _SketchBackend:
    """只回答草图提示的假后端。"""
    enabled = True

    def __init__(self, sketch_text):
        self.sketch_text = sketch_text
        self.prompts = []

    async def complete(self, prompt, n=None):
        self.prompts.append(prompt)
        return [self.sketch_text] if "# Instruction:" in prompt else []


def _learner(library=None, backend=None, diagnostics=None):
    config = AppConfig(generalize=GeneralizeConfig(diagnostics_file=diagnostics))
    search = SearchConfig.for_variant("lp", patience=None)
    return ConceptLearner(config, logging.getLogger("tests.learner"), library, backend, search)


@pytest.mark.asyncio
async def test_learns_tower_from_scratch(tower_lib, make_demo):
    demos = [make_demo("tower", n, tower_lib) for n in (3, 4, 5)]
    learner = _learner()
    outcome = await learner.learn_concept(demos)
    assert outcome.success, outcome.error
    assert outcome.concept == "tower"
    assert emit_program_text(outcome.program) == TOWER_TEXT
    assert learner.library.names == ("tower",)
    assert outcome.expansions > 0
    assert program_accuracy(outcome.program, gold_library().get("tower"), learner.library) == 1


@pytest.mark.asyncio
async def test_learns_staircase_on_top_of_tower(tower_lib, gold_lib, make_demo):
    demos = [make_demo("staircase", n, gold_lib) for n in (3, 4)]
    learner = _learner(tower_lib)
    outcome = await learner.learn_concept(demos)
    assert outcome.success, outcome.error
    assert learner.library.names == ("tower", "staircase")
    assert program_accuracy(outcome.program, gold_lib.get("staircase"), learner.library, gold_lib=gold_lib) == 1


@pytest.mark.asyncio
async def test_diagnostics_file(tower_lib, make_demo, tmp_path):
    path = tmp_path / "candidates.tsv"
    learner = _learner(diagnostics=str(path))
    await learner.learn_concept([make_demo("tower", 3, tower_lib)])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines
    assert all(line.startswith("tower\t") for line in lines)


@pytest.mark.asyncio
async def test_backend_sketch_fallback(tower_lib):
    backend = _SketchBackend("Tower(height = 3, objects = filter(red, cubes))")
    learner = _learner(backend=backend)
    sketch = await learner.sketch("please stack three red cubes on each other")
    assert sketch == TaskSketch("tower", 3, ("red", "cube"))
    assert len(backend.prompts) == 1


@pytest.mark.asyncio
async def test_unparseable_without_backend():
    with pytest.raises(InstructionError):
        await _learner().sketch("please stack three red cubes on each other")


@pytest.mark.asyncio
async def test_failure_leaves_library_unchanged(tower_lib, make_demo):
    demo = make_demo("tower", 3, tower_lib)
    broken = replace(demo, instruction="please stack three red cubes on each other")
    learner = _learner(tower_lib)
    outcome = await learner.learn_concept([broken])
    assert not outcome.success
    assert "cannot parse instruction" in outcome.error
    assert learner.library.names == ("tower",)


@pytest.mark.asyncio
async def test_demos_must_agree_on_concept(tower_lib, gold_lib, make_demo):
    demos = [make_demo("tower", 3, tower_lib), make_demo("row", 3, gold_lib)]
    outcome = await _learner().learn_concept(demos)
    assert not outcome.success
    assert "different concepts" in outcome.error


@pytest.mark.asyncio
async def test_no_demonstrations():
    outcome = await _learner().learn_concept([])
    assert outcome.error == "no demonstrations"


@pytest.mark.asyncio
async def test_curriculum_builds_on_learned_concepts(gold_lib, make_demo):
    grouped = {
        "tower": [make_demo("tower", n, gold_lib) for n in (3, 4)],
        "staircase": [make_demo("staircase", n, gold_lib) for n in (3, 4)],
    }
    learner = _learner(ConceptLibrary())
    outcomes = await learner.learn_curriculum(grouped)
    assert [o.success for o in outcomes] == [True, True]
    assert learner.library.names == ("tower", "staircase")
    assert program_accuracy(learner.library.get("staircase"), gold_lib.get("staircase"), learner.library,
                            gold_lib=gold_lib) == 1


@pytest.mark.asyncio
async def test_known_concept_skips_search(tower_lib, make_demo):
    learner = _learner(tower_lib)
    outcome = await learner.learn_concept([make_demo("tower", n, tower_lib) for n in (3, 4)])
    assert outcome.success
    assert outcome.source == "library"
    assert outcome.program is tower_lib.get("tower")
    assert outcome.searches == []
    assert outcome.expansions == 0
    assert outcome.candidates == 0
