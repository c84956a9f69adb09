import argparse
import asyncio
import json
import logging
import os
import sys
from typing import List, Optional

from .block_world import ExecContext, Scene
from .completion_backend import CompletionBackend
from .concept_dsl import ConceptLibrary, execute, flatten_plan, load_library, plan_text, save_library
from .concept_learner import ConceptLearner
from .config_manager import VARIANTS, AppConfig, SearchConfig, get_config
from .constraint_solver import construct_with_constraints
from .corpus_manager import DatasetSpec, gen_corpus_summary, generate_corpus, gold_name_map, load_corpus
from .evaluation_engine import evaluate_library, run_benchmark
from .exceptions import SPGError
from .goal_planner import choose_anchor, forward_search, goal_from_relative, plan_to_goal
from .logger_config import setup_logging
from .scene_graph import extract_scene_graph, find_size
from .sketch_parser import (
    ConstrainedConstruct,
    Construct,
    RelativeMove,
    SizeQuery,
    UnknownConcept,
    anchored_plan,
    ground_reference,
    ground_relative_move,
    ground_sketch,
    matching_ids,
    parse_instruction,
    relative_plan,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spg", description="从演示中学习可泛化的积木搭建概念程序")
    parser.add_argument("--config", default=None, help="YAML 配置文件路径")
    parser.add_argument("--log-level", default=None, help="日志级别，覆盖配置文件")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="生成数据集 I/II/III")
    p.add_argument("--dataset", required=True, choices=["1", "2", "3", "I", "II", "III"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("learn", help="按课程顺序从演示中学习概念")
    p.add_argument("--demos", required=True)
    p.add_argument("--library", required=True, help="输出的概念库文件；已存在时在其基础上继续学习")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="lp")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("exec", help="解析指令并执行库中的概念")
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", default=None, help="执行轨迹输出文件")

    p = sub.add_parser("plan", help="目标条件前向搜索")
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", default=None, help="重放轨迹输出文件")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("constrain", help="带关系约束的构造")
    p.add_argument("--library", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", default=None, help="计划输出文件")

    p = sub.add_parser("eval", help="对照金标准评测概念库")
    p.add_argument("--corpus", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("graph", help="打印场景图")
    p.add_argument("--scene", required=True)

    p = sub.add_parser("benchmark", help="学习 + 评测的完整基准")
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--variants", default="lp", help="逗号分隔，例如 lp,l,p")
    p.add_argument("--budget", type=int, default=None)
    return parser


def _write_trace(path: str, instruction: str, keyframes: List[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"instruction": instruction, "keyframes": [k.to_dict() for k in keyframes]}, f, indent=2)


# ---- 子命令 ----

def cmd_gen_corpus(args, config: AppConfig) -> int:
    entries = generate_corpus(DatasetSpec.named(args.dataset), args.out, args.seed, config.corpus)
    print(gen_corpus_summary(entries))
    return EXIT_OK


async def cmd_learn(args, config: AppConfig) -> int:
    overrides = config.search.model_dump(exclude={"use_library", "use_pruner"})
    overrides["seed"] = args.seed
    if args.budget:
        overrides["budget"] = args.budget
    if args.topk:
        overrides["k"] = args.topk
    search = SearchConfig.for_variant(args.variant, **overrides)
    config = config.model_copy(update={"generalize": config.generalize.model_copy(update={"seed": args.seed})})
    library = load_library(args.library) if os.path.exists(args.library) else ConceptLibrary()
    backend = CompletionBackend()
    learner = ConceptLearner(config, logger, library, backend if backend.enabled else None, search)
    outcomes = await learner.learn_curriculum(load_corpus(args.demos))
    save_library(learner.library, args.library)
    for o in outcomes:
        status = "ok" if o.success else f"FAILED ({o.error})"
        print(f"{o.concept}\t{status}\texpansions={o.expansions}")
    return EXIT_OK if all(o.success for o in outcomes) else EXIT_FAILURE


def cmd_exec(args, config: AppConfig) -> int:
    library = load_library(args.library)
    scene = Scene.load(args.scene)
    parsed = parse_instruction(args.instruction, library)
    if isinstance(parsed, UnknownConcept):
        print(f"unknown concept '{parsed.name}'")
        return EXIT_FAILURE
    if isinstance(parsed, SizeQuery):
        size = find_size(scene, parsed.concept, matching_ids(scene, parsed.filter), library,
                         config.scene_graph.iou_threshold)
        print(size)
        return EXIT_OK
    if isinstance(parsed, ConstrainedConstruct):
        return _report_constrained(parsed, scene, library, config, args.out)

    if isinstance(parsed, RelativeMove):
        steps = ground_relative_move(parsed, scene)
        plan, movers = relative_plan(steps)
        trace = execute(plan, ExecContext(scene, scene.block(steps[0][2]).pose, (), movers), library)
        print(plan_text(plan))
    elif parsed.anchor is not None:
        sketch = parsed.sketch
        reference = ground_reference(scene, parsed.anchor.reference_filter)
        grounded = ground_sketch(sketch, scene, library)
        ids = tuple(i for i in grounded.object_ids if i != reference)
        plan = anchored_plan(sketch, parsed.anchor.direction, reference)
        trace = execute(plan, ExecContext(scene, scene.block(reference).pose, (), ids), library)
        print(plan_text(flatten_plan(plan, library)))
    else:
        sketch = parsed.sketch
        grounded = ground_sketch(sketch, scene, library)
        offsets = library.relative_placements(sketch.concept, sketch.size)
        anchor = choose_anchor(scene, offsets)
        trace = execute(sketch.concept, ExecContext(scene, anchor, (), grounded.object_ids), library, sketch.size)
        print(plan_text(library.unrolled(sketch.concept, sketch.size)))
    for result in trace.placements:
        print(f"b{result.block_id} -> {tuple(round(c, 6) for c in result.cuboid)}")
    if args.out:
        _write_trace(args.out, args.instruction, trace.keyframes)
    return EXIT_OK


def cmd_plan(args, config: AppConfig) -> int:
    library = load_library(args.library)
    scene = Scene.load(args.scene)
    parsed = parse_instruction(args.instruction, library)
    planner_config = config.planner.model_copy(update={"seed": args.seed})
    if isinstance(parsed, RelativeMove):
        goal = goal_from_relative(ground_relative_move(parsed, scene), scene)
        result = forward_search(scene, goal, planner_config)
    elif isinstance(parsed, (Construct, ConstrainedConstruct)):
        reference = None
        if isinstance(parsed, Construct) and parsed.anchor is not None:
            reference = (parsed.anchor.direction, ground_reference(scene, parsed.anchor.reference_filter))
        grounded = ground_sketch(parsed.sketch, scene, library)
        goal, result = plan_to_goal(scene, grounded, library, planner_config, reference)
    else:
        print(f"'{args.instruction}' is not a construction of a known concept")
        return EXIT_FAILURE
    for action in result.actions:
        print(action)
    if args.out:
        _write_trace(args.out, args.instruction, result.trace)
    if not result.success:
        print(f"FAILED: best heuristic {result.best_heuristic} after {result.expansions} expansions")
        return EXIT_FAILURE
    return EXIT_OK


def _report_constrained(parsed: ConstrainedConstruct, scene: Scene, library: ConceptLibrary,
                        config: AppConfig, out: Optional[str]) -> int:
    outcome = construct_with_constraints(parsed, scene, library, config.scene_graph.iou_threshold)
    if not outcome.result.sat:
        print("UNSAT")
        for reason in outcome.result.failed:
            print(f"  {reason}")
        return EXIT_FAILURE
    print("slot\tblock\tcolor")
    for slot in sorted(outcome.result.assignment):
        print(f"{slot}\tb{outcome.result.assignment[slot]}\t{outcome.result.colors[slot]}")
    print(plan_text(outcome.plan))
    print(f"verified {outcome.checked} relation checks, {len(outcome.violations)} violations")
    if out:
        with open(out, "w", encoding="utf-8") as f:
            json.dump({"concept": outcome.sketch.concept, "size": outcome.sketch.size,
                       "plan": [str(step) for step in outcome.plan],
                       "remaining": list(outcome.block_order)}, f, indent=2)
    return EXIT_OK if not outcome.violations else EXIT_FAILURE


def cmd_constrain(args, config: AppConfig) -> int:
    library = load_library(args.library)
    scene = Scene.load(args.scene)
    parsed = parse_instruction(args.instruction, library)
    if not isinstance(parsed, ConstrainedConstruct):
        print(f"'{args.instruction}' carries no constraints")
        return EXIT_FAILURE
    return _report_constrained(parsed, scene, library, config, args.out)


def cmd_eval(args, config: AppConfig) -> int:
    library = load_library(args.library)
    report = evaluate_library(library, gold_name_map(args.corpus), config.corpus.eval_sizes)
    report.write_csv(args.report)
    print(report.aggregates().to_string(index=False))
    return EXIT_OK


def cmd_graph(args, config: AppConfig) -> int:
    scene = Scene.load(args.scene)
    for line in extract_scene_graph(scene, threshold=config.scene_graph.iou_threshold).lines():
        print(line)
    return EXIT_OK


async def cmd_benchmark(args, config: AppConfig) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    report = await run_benchmark(args.corpus, config, variants, args.budget, config.corpus.eval_sizes, logger)
    report.write_csv(args.report)
    print(report.aggregates().to_string(index=False))
    return EXIT_OK


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "learn": cmd_learn,
    "exec": cmd_exec,
    "plan": cmd_plan,
    "constrain": cmd_constrain,
    "eval": cmd_eval,
    "graph": cmd_graph,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLI 入口。退出码：0 成功，1 领域失败（UNSAT、搜索失败等），2 用法错误。
    """
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        config = get_config(args.config)
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.log_level or config.logging.level, config.logging.file)

    handler = _COMMANDS[args.command]
    try:
        if asyncio.iscoroutinefunction(handler):
            return asyncio.run(handler(args, config))
        return handler(args, config)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SPGError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
