"""
Generalize 阶段：把若干演示的落地计划抽象成一个与尺寸无关的概念程序。

离线路径按三类假设枚举候选程序，并用精确展开逐一验证：
  (a) 直线程序，每个尺寸槽在各演示间做仿射拟合；
  (b) 前导 + 单层循环 + 收尾，循环次数关于 n 仿射，支持末次迭代裁剪；
  (c) 先把连续相同的移动压缩成内层循环，再套用 (a)、(b)。
可选的文本补全后端产出的候选进入同一个候选池，由 select_best 统一打分。
"""
import logging
from dataclasses import dataclass
from itertools import product
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .block_world import ActionKind, Direction, PrimitiveAction
from .concept_dsl import (
    KEEP_STEP,
    Call,
    ConceptLibrary,
    Loop,
    MacroStep,
    Plan,
    PlanStep,
    Prim,
    Program,
    SizeExpr,
    Stmt,
    description_length,
    emit_program_text,
    expand,
    parse_program_text,
)
from .config_manager import GeneralizeConfig
from .exceptions import GeneralizationError, ProgramError, SPGError
from .plan_search_engine import DemoTrace, PlanCandidate, replay_plan
from .sketch_parser import GroundedSketch

logger = logging.getLogger(__name__)


# ---- 仿射拟合 ----

_FORMS = ((False, False), (False, True), (True, False), (True, True))


def fit_affine(observations: Sequence[Tuple[int, int, int]], allow_index: bool = True) -> Optional[SizeExpr]:
    """
    对 (n, i, value) 观测做自由度最少的精确整数拟合：
    依次尝试常数、c0+c2·i、c0+c1·n、c0+c1·n+c2·i，残差全为 0 才算成功。

    Returns:
        SizeExpr，拟合失败时返回 None。
    """
    if not observations:
        return None
    data = np.asarray(observations, dtype=float).reshape(-1, 3)
    ns, idx, values = data[:, 0], data[:, 1], data[:, 2]
    for use_n, use_i in _FORMS:
        if use_i and not allow_index:
            continue
        columns = [np.ones_like(values)]
        if use_n:
            columns.append(ns)
        if use_i:
            columns.append(idx)
        design = np.column_stack(columns)
        coef, *_ = np.linalg.lstsq(design, values, rcond=None)
        coef = np.rint(coef).astype(int)
        if np.array_equal(design @ coef, values):
            coef = coef.tolist()
            c0 = coef.pop(0)
            c1 = coef.pop(0) if use_n else 0
            c2 = coef.pop(0) if use_i else 0
            return SizeExpr(c0, c1, c2)
    return None


# ---- 演示束 ----

@dataclass(frozen=True)
class BundleEntry:
    demo: DemoTrace
    grounded: GroundedSketch
    candidate: PlanCandidate

    @property
    def n(self) -> int:
        return self.grounded.size


@dataclass(frozen=True)
class DemoBundle:
    concept: str
    entries: Tuple[BundleEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise GeneralizationError(self.concept)


def build_bundles(concept: str, searched: Sequence[Tuple[DemoTrace, GroundedSketch, Sequence[PlanCandidate]]],
                  k: int) -> List[DemoBundle]:
    """按计划名次组束：第 r 个束取每个演示的第 r 名计划（不足时取最后一名）。"""
    bundles: List[DemoBundle] = []
    seen = set()
    usable = [(d, g, c) for d, g, c in searched if c]
    if not usable:
        return []
    for rank in range(k):
        entries = tuple(BundleEntry(d, g, c[min(rank, len(c) - 1)]) for d, g, c in usable)
        key = tuple(e.candidate.plan for e in entries)
        if key in seen:
            continue
        seen.add(key)
        bundles.append(DemoBundle(concept, entries))
    return bundles


@dataclass(frozen=True)
class CandidateProgram:
    program: Program
    source: str
    rank: int = 0
    attempt: int = 0

    @property
    def text(self) -> str:
        return emit_program_text(self.program)


# ---- 计划分段与规范化 ----

class Token(NamedTuple):
    """计划分段后的一个片段：prim（原语）、call（宏调用）或 run（连续同向移动）。"""
    kind: str
    name: str
    value: int = 0
    action: Optional[PrimitiveAction] = None


def canonical_plan(plan: Sequence[PlanStep], library: ConceptLibrary) -> Plan:
    """把尺寸 1 的单元概念宏改写成 keep_at_head，两者放置完全相同。"""
    out = []
    for step in plan:
        if isinstance(step, MacroStep) and step.size == 1 and step.concept in library \
                and library.is_unit(step.concept):
            out.append(KEEP_STEP)
        else:
            out.append(step)
    return tuple(out)


def segment_plan(plan: Sequence[PlanStep], compress_runs: bool = False) -> List[Token]:
    tokens: List[Token] = []
    for step in plan:
        if isinstance(step, MacroStep):
            tokens.append(Token("call", step.concept, step.size))
            continue
        action = step.action
        if compress_runs and action.kind is ActionKind.MOVE_HEAD:
            last = tokens[-1] if tokens else None
            if last is not None and last.kind == "run" and last.name == action.direction.value:
                tokens[-1] = last._replace(value=last.value + 1)
            else:
                tokens.append(Token("run", action.direction.value, 1, action))
            continue
        tokens.append(Token("prim", action.label, 0, action))
    return tokens


def _slot(observations: Sequence[Tuple[int, int, Token]], library: ConceptLibrary,
          allow_index: bool) -> Optional[Stmt]:
    """把同一位置上跨演示、跨迭代的片段统一成一条语句；形状不一致时返回 None。"""
    tokens = [tok for _, _, tok in observations]
    first = tokens[0]
    if all(t.kind == "prim" and t.name == first.name for t in tokens) and first.kind == "prim":
        return Prim(first.action)

    calls = {t.name for t in tokens if t.kind == "call"}
    if len(calls) == 1:
        concept = next(iter(calls))
        keep_label = KEEP_STEP.label
        if all(t.kind == "call" or (t.kind == "prim" and t.name == keep_label) for t in tokens):
            if any(t.kind == "prim" for t in tokens) and not library.is_unit(concept):
                return None
            obs = [(n, i, t.value if t.kind == "call" else 1) for n, i, t in observations]
            size = fit_affine(obs, allow_index)
            return Call(concept, size) if size is not None else None
        return None

    if all(t.kind == "run" and t.name == first.name for t in tokens):
        count = fit_affine([(n, i, t.value) for n, i, t in observations], allow_index)
        if count is None:
            return None
        move = Prim(PrimitiveAction.move(Direction(first.name)))
        if count == SizeExpr.const(1):
            return move
        return Loop(count, (move,))
    return None


# ---- 假设枚举 ----

def _straight_line(concept: str, sequences: Sequence[Tuple[int, List[Token]]],
                   library: ConceptLibrary) -> Iterator[Program]:
    lengths = {len(tokens) for _, tokens in sequences}
    if len(lengths) != 1:
        return
    body = []
    for j in range(lengths.pop()):
        stmt = _slot([(n, 0, tokens[j]) for n, tokens in sequences], library, allow_index=False)
        if stmt is None:
            return
        body.append(stmt)
    try:
        yield Program(concept, tuple(body))
    except ProgramError:
        return


def _single_loop(concept: str, sequences: Sequence[Tuple[int, List[Token]]], library: ConceptLibrary,
                 config: GeneralizeConfig) -> Iterator[Program]:
    shortest = min(len(tokens) for _, tokens in sequences)
    for p, q, b in product(range(config.max_preamble + 1), range(config.max_postamble + 1),
                           range(1, config.max_body + 1)):
        if p + q > shortest:
            continue
        for t in range(b):
            program = _try_loop(concept, sequences, library, p, q, b, t)
            if program is not None:
                yield program


def _try_loop(concept: str, sequences: Sequence[Tuple[int, List[Token]]], library: ConceptLibrary,
              p: int, q: int, b: int, t: int) -> Optional[Program]:
    counts = []
    for _, tokens in sequences:
        region = len(tokens) - p - q
        if region + t <= 0 or (region + t) % b:
            return None
        counts.append((region + t) // b)

    count_expr = fit_affine([(n, 0, c) for (n, _), c in zip(sequences, counts)], allow_index=False)
    if count_expr is None:
        return None

    pre = []
    for j in range(p):
        stmt = _slot([(n, 0, tokens[j]) for n, tokens in sequences], library, allow_index=False)
        if stmt is None:
            return None
        pre.append(stmt)
    post = []
    for j in range(q):
        stmt = _slot([(n, 0, tokens[len(tokens) - q + j]) for n, tokens in sequences], library,
                     allow_index=False)
        if stmt is None:
            return None
        post.append(stmt)

    body = []
    for j in range(b):
        observations = []
        for (n, tokens), count in zip(sequences, counts):
            for k in range(count):
                if k == count - 1 and j >= b - t:
                    continue
                observations.append((n, k, tokens[p + k * b + j]))
        if not observations:
            return None
        stmt = _slot(observations, library, allow_index=True)
        if stmt is None:
            return None
        body.append(stmt)

    try:
        return Program(concept, (*pre, Loop(count_expr, tuple(body), t), *post))
    except ProgramError:
        return None


class GeneralizationEngine:
    """
    计划到程序的归纳引擎。
    """

    def __init__(self, config: GeneralizeConfig, logger: Optional[logging.Logger] = None):
        self.config = config
        self.logger = logger or logging.getLogger(__name__)

    def _families(self, bundle: DemoBundle, library: ConceptLibrary):
        plain = [(e.n, segment_plan(canonical_plan(e.candidate.plan, library))) for e in bundle.entries]
        runs = [(e.n, segment_plan(canonical_plan(e.candidate.plan, library), compress_runs=True))
                for e in bundle.entries]
        concept = bundle.concept
        return [
            ("straight", lambda: _straight_line(concept, plain, library)),
            ("loop", lambda: _single_loop(concept, plain, library, self.config)),
            ("runs", lambda: (prog for gen in (_straight_line(concept, runs, library),
                                               _single_loop(concept, runs, library, self.config))
                              for prog in gen)),
        ]

    def synthesize(self, bundle: DemoBundle, library: ConceptLibrary, attempt: int = 0,
                   rank: int = 0) -> List[CandidateProgram]:
        """枚举并验证候选程序；没有候选通过验证时返回空列表。"""
        families = self._families(bundle, library)
        if attempt:
            rng = np.random.default_rng(self.config.seed + attempt)
            families = [families[i] for i in rng.permutation(len(families))]

        expected = [canonical_plan(e.candidate.plan, library) for e in bundle.entries]
        found: List[CandidateProgram] = []
        seen = set()
        for family, generate in families:
            for program in generate():
                text = emit_program_text(program)
                if text in seen:
                    continue
                seen.add(text)
                if validate_program(program, bundle, library, expected):
                    found.append(CandidateProgram(program, f"offline:{family}", rank, attempt))
                    if len(found) >= self.config.max_candidates_per_attempt:
                        return found
        return found

    def candidate_pool(self, bundles: Sequence[DemoBundle], library: ConceptLibrary) -> List[CandidateProgram]:
        pool: List[CandidateProgram] = []
        seen = set()
        for rank, bundle in enumerate(bundles):
            for attempt in range(self.config.attempts):
                for candidate in self.synthesize(bundle, library, attempt, rank):
                    if candidate.text not in seen:
                        seen.add(candidate.text)
                        pool.append(candidate)
        self.logger.info("Synthesized %d distinct candidate programs from %d bundles",
                         len(pool), len(bundles))
        return pool


def validate_program(program: Program, bundle: DemoBundle, library: ConceptLibrary,
                     expected: Optional[Sequence[Plan]] = None) -> bool:
    """程序在每个演示的 n 上展开（规范化后）必须与该演示的计划逐步相同。"""
    if expected is None:
        expected = [canonical_plan(e.candidate.plan, library) for e in bundle.entries]
    for entry, plan in zip(bundle.entries, expected):
        try:
            produced = canonical_plan(expand(program, entry.n, library), library)
        except ProgramError:
            return False
        if produced != plan:
            return False
    return True


def synthesize(bundle: DemoBundle, library: ConceptLibrary,
               config: Optional[GeneralizeConfig] = None) -> List[CandidateProgram]:
    engine = GeneralizationEngine(config or GeneralizeConfig())
    return engine.synthesize(bundle, library)


def score_program(program: Program, bundle: DemoBundle, library: ConceptLibrary) -> float:
    """在每个演示的初始场景上重放程序，取每次放置 IoU 的平均值，再对演示求平均。"""
    scores = []
    for entry in bundle.entries:
        try:
            plan = expand(program, entry.n, library)
            replay = replay_plan(plan, entry.demo, entry.grounded, library)
        except SPGError as e:
            logger.debug("Program %s fails on demo n=%d: %s", program.name, entry.n, e)
            scores.append(0.0)
            continue
        rewards = replay.placement_rewards
        denom = max(entry.demo.transitions, len(rewards))
        scores.append(float(sum(rewards)) / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def select_best(candidates: Sequence[CandidateProgram], bundle: DemoBundle,
                library: ConceptLibrary) -> CandidateProgram:
    """
    得分最高者胜出；同分取描述长度最短，再同则取最早的候选。

    Raises:
        GeneralizationError: 候选池为空。
    """
    if not candidates:
        raise GeneralizationError(bundle.concept)
    scored = [(score_program(c.program, bundle, library), description_length(c.program), index, c)
              for index, c in enumerate(candidates)]
    best = min(scored, key=lambda s: (-round(s[0], 9), s[1], s[2]))
    logger.info("Selected %s (score %.4f, length %d, source %s) among %d candidates",
                best[3].text, best[0], best[1], best[3].source, len(candidates))
    return best[3]


# ---- 后端 ----

def build_generalization_prompt(bundle: DemoBundle, library: ConceptLibrary) -> str:
    lines = ["# Concept library:"]
    lines.extend(f"#   {emit_program_text(p)}" for p in library)
    for entry in bundle.entries:
        lines.append(f"# Function Call: {bundle.concept}(size = {entry.n}, objects = ObjSet_1)")
        steps = ", ".join(_trace_step(step) for step in entry.candidate.plan)
        lines.append(f"# Execution: {steps}, ")
    lines.append("")
    lines.append("#Write the function definition, which generalizes the above executions. "
                 "Note that some of the executions can be partially wrong. "
                 "Answer with a single s-expression in the concept language, for example "
                 "(def tower (n) (loop n (keep) (move top))).")
    lines.append(f"(def {bundle.concept} (n)")
    return "\n".join(lines)


def _trace_step(step: PlanStep) -> str:
    if isinstance(step, MacroStep):
        return f"{step.concept}(size={step.size}, obj = ObjSet_1)"
    action = step.action
    if action.kind is ActionKind.MOVE_HEAD:
        return f"move_head(dir = {action.direction.value})"
    if action.kind is ActionKind.KEEP_AT_HEAD:
        return "keep_at_head(obj = ObjSet_1)"
    return f"{action.kind.value}()"


def extract_program_text(completion: str, concept: str) -> Optional[str]:
    """从补全文本里取出第一个完整的 (def ...) 表达式；补全若只续写了函数体就补上开头。"""
    text = completion
    start = text.find("(def ")
    if start < 0:
        text = f"(def {concept} (n) " + text.lstrip()
        start = 0
    depth = 0
    for pos in range(start, len(text)):
        if text[pos] == "(":
            depth += 1
        elif text[pos] == ")":
            depth -= 1
            if depth == 0:
                return text[start:pos + 1]
    return None


def parse_backend_candidates(completions: Sequence[str], bundle: DemoBundle,
                             library: ConceptLibrary, rank: int = 0) -> List[CandidateProgram]:
    """把后端补全解析成候选程序；无法解析或依赖未注册的补全直接丢弃。"""
    candidates = []
    for attempt, completion in enumerate(completions):
        text = extract_program_text(completion, bundle.concept)
        if text is None:
            logger.warning("Backend completion %d has no complete definition; dropped", attempt)
            continue
        try:
            program = parse_program_text(text).renamed(bundle.concept)
        except ProgramError as e:
            logger.warning("Backend completion %d does not parse: %s", attempt, e)
            continue
        missing = [d for d in program.dependencies if d not in library]
        if missing:
            logger.warning("Backend completion %d calls unknown concepts %s; dropped", attempt, missing)
            continue
        candidates.append(CandidateProgram(program, "backend", rank, attempt))
    return candidates


async def generalize_via_backend(bundle: DemoBundle, library: ConceptLibrary, backend,
                                 rank: int = 0) -> List[CandidateProgram]:
    """
    通过文本补全后端生成候选。后端未配置、网络或解析失败都返回空列表，不影响离线路径。

    Args:
        backend: CompletionBackend 实例或 None。
    """
    if backend is None or not backend.enabled:
        return []
    prompt = build_generalization_prompt(bundle, library)
    completions = await backend.complete(prompt)
    return parse_backend_candidates(completions, bundle, library, rank)
