import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .completion_backend import CompletionBackend, write_diagnostics
from .concept_dsl import ConceptLibrary, Program, emit_program_text, register_concept
from .config_manager import AppConfig, SearchConfig
from .exceptions import GeneralizationError, InstructionError, SPGError
from .generalization_engine import (
    CandidateProgram,
    GeneralizationEngine,
    build_bundles,
    generalize_via_backend,
    select_best,
)
from .plan_search_engine import DemoTrace, PlanCandidate, PlanSearchEngine, SearchResult
from .sketch_parser import (
    Construct,
    ConstrainedConstruct,
    GroundedSketch,
    TaskSketch,
    UnknownConcept,
    build_sketch_prompt,
    ground_sketch,
    parse_instruction,
    parse_sketch_call,
)


@dataclass
class LearnOutcome:
    """
    一次概念学习的结果。program 为 None 表示学习失败，error 记录原因。
    """
    concept: str
    program: Optional[Program] = None
    source: str = ""
    searches: List[SearchResult] = field(default_factory=list)
    candidates: int = 0
    error: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.program is not None

    @property
    def expansions(self) -> int:
        return sum(s.expansions for s in self.searches)

    @property
    def expansions_to_best(self) -> int:
        return max((s.expansions_to_best for s in self.searches), default=0)


class ConceptLearner:
    """
    Sketch → Plan → Generalize → 注册 的学习流水线，持有并逐步扩充概念库。
    """

    def __init__(self, config: AppConfig, logger: logging.Logger,
                 library: Optional[ConceptLibrary] = None,
                 backend: Optional[CompletionBackend] = None,
                 search_config: Optional[SearchConfig] = None):
        self.config = config
        self.logger = logger
        self.library = library or ConceptLibrary()
        self.backend = backend
        self.search_config = search_config or config.search
        self.generalizer = GeneralizationEngine(config.generalize, logger)

    async def sketch(self, instruction: str) -> TaskSketch:
        """
        解析演示指令得到任务草图。模板文法解析失败且配置了后端时，改用后端的草图调用。

        Raises:
            InstructionError: 两条路径都无法得到草图。
        """
        try:
            parsed = parse_instruction(instruction, self.library)
        except InstructionError:
            if self.backend is None or not self.backend.enabled:
                raise
            completions = await self.backend.complete(build_sketch_prompt(instruction, self.library), n=1)
            for text in completions:
                try:
                    return parse_sketch_call(text)
                except InstructionError as e:
                    self.logger.warning("Backend sketch unusable: %s", e)
            raise
        if isinstance(parsed, (Construct, ConstrainedConstruct)):
            return parsed.sketch
        if isinstance(parsed, UnknownConcept) and parsed.sketch is not None:
            return parsed.sketch
        raise InstructionError(f"instruction '{instruction}' does not describe a construction")

    async def _sketch_demos(self, demos: Sequence[DemoTrace]) -> Tuple[str, List[TaskSketch]]:
        sketches = []
        for demo in demos:
            sketch = await self.sketch(demo.instruction)
            if sketches and sketch.concept != sketches[0].concept:
                raise InstructionError(
                    f"demonstrations name different concepts: '{sketches[0].concept}' and '{sketch.concept}'")
            sketches.append(sketch)
        return sketches[0].concept, sketches

    def _plan_demos(self, demos: Sequence[DemoTrace], sketches: Sequence[TaskSketch]
                    ) -> Tuple[List[Tuple[DemoTrace, GroundedSketch, List[PlanCandidate]]], List[SearchResult]]:
        engine = PlanSearchEngine(self.search_config, self.logger)
        searched, results = [], []
        for demo, sketch in zip(demos, sketches):
            grounded = ground_sketch(sketch, demo.initial_scene, required=demo.transitions)
            result = engine.search(demo, grounded, self.library)
            results.append(result)
            searched.append((demo, grounded, result.candidates))
        return searched, results

    async def learn_concept(self, demos: Sequence[DemoTrace]) -> LearnOutcome:
        """
        从同一概念的若干演示学习一个程序并注册到库中。失败时库不变。
        """
        if not demos:
            return LearnOutcome("", error="no demonstrations")
        outcome = LearnOutcome(demos[0].concept or "")
        try:
            name, sketches = await self._sketch_demos(demos)
            outcome.concept = name
            if name in self.library:
                self.logger.warning("Concept %s is already in the library; keeping the existing program", name)
                outcome.program = self.library.get(name)
                outcome.source = "library"
                return outcome
            searched, outcome.searches = self._plan_demos(demos, sketches)
            bundles = build_bundles(name, searched, self.search_config.k)
            if not bundles:
                raise GeneralizationError(name)

            pool: List[CandidateProgram] = self.generalizer.candidate_pool(bundles, self.library)
            for rank, bundle in enumerate(bundles):
                pool.extend(await generalize_via_backend(bundle, self.library, self.backend, rank))
            outcome.candidates = len(pool)
            if self.config.generalize.diagnostics_file:
                await write_diagnostics(self.config.generalize.diagnostics_file,
                                        [f"{name}\t{c.source}\t{c.text}" for c in pool])

            best = select_best(pool, bundles[0], self.library)
            self.library = register_concept(self.library, best.program)
            outcome.program, outcome.source = best.program, best.source
            self.logger.info("Learned %s", emit_program_text(best.program))
        except SPGError as e:
            self.logger.error("Failed to learn concept %s: %s", outcome.concept or "?", e)
            outcome.error = str(e)
        return outcome

    async def learn_curriculum(self, grouped: Dict[str, Sequence[DemoTrace]]) -> List[LearnOutcome]:
        """按给定顺序依次学习每个概念；单个概念失败不影响后续概念。"""
        outcomes = []
        for key, demos in grouped.items():
            self.logger.info("Learning concept %s from %d demonstrations", key, len(demos))
            outcomes.append(await self.learn_concept(demos))
        learned = sum(o.success for o in outcomes)
        self.logger.info("Curriculum finished: %d/%d concepts learned", learned, len(outcomes))
        return outcomes
