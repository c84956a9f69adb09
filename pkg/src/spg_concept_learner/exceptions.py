"""
项目统一的异常层次。

每个模块一族异常，全部继承自 SPGError，同时继承对应的内置异常类型，
调用方按内置类型捕获也能正常工作。
"""
from typing import Optional


class SPGError(Exception):
    """所有领域异常的基类。CLI 将其映射为退出码 1。"""


# ---- world ----

class WorldError(SPGError, ValueError):
    """方块世界状态或原语动作相关的错误。"""


class EmptyHeadStackError(WorldError):
    def __init__(self):
        super().__init__("empty head stack")


class NoObjectsLeftError(WorldError):
    def __init__(self):
        super().__init__("no objects left")


class TableFullError(WorldError):
    def __init__(self, attempts: int):
        super().__init__(f"table full (no free position after {attempts} attempts)")
        self.attempts = attempts


# ---- dsl ----

class ProgramError(SPGError, ValueError):
    """概念程序结构或求值错误。"""


class DegenerateSizeError(ProgramError):
    def __init__(self, concept: str, value: int):
        super().__init__(f"degenerate size: call {concept} evaluated to {value}")
        self.concept = concept
        self.value = value


class ProgramSyntaxError(ProgramError):
    """程序文本解析失败，携带出错位置。"""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class LibraryError(ProgramError, KeyError):
    """概念库错误：重复注册、依赖未注册、未知概念。"""

    def __str__(self) -> str:
        # KeyError 默认会给消息加引号
        return str(self.args[0]) if self.args else ""


class ExecutionError(SPGError, RuntimeError):
    """执行计划时某一步放置无效。"""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


# ---- sketch ----

class InstructionError(SPGError, ValueError):
    """指令无法解析。"""


class InsufficientObjectsError(InstructionError):
    def __init__(self, required: int, available: int, filter_tokens: Optional[tuple] = None):
        super().__init__(
            f"insufficient objects: required {required}, available {available}"
            + (f" for filter {list(filter_tokens)}" if filter_tokens else "")
        )
        self.required = required
        self.available = available


# ---- search / generalize ----

class SearchStuckError(SPGError, RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("search stuck" + (f": {detail}" if detail else ""))


class GeneralizationError(SPGError, RuntimeError):
    def __init__(self, concept: str):
        super().__init__(f"generalization failed for concept '{concept}'")
        self.concept = concept


# ---- constraints / corpus ----

class ConstraintCompileError(SPGError, ValueError):
    """约束子句引用了槽位网格中不存在的邻接关系。"""


class CorpusError(SPGError, RuntimeError):
    """语料生成或评测数据错误。"""
