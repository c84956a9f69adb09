import math
import os
from functools import lru_cache
from typing import List, Optional, Tuple

import yaml
# 导入 Pydantic 的核心组件
from pydantic import BaseModel, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


# 1. 使用 Pydantic 的 BaseModel 定义配置模型
# 所有可调参数都在这里集中声明，自动完成类型转换和范围校验

VARIANTS = {
    # variant -> (use_library, use_pruner)
    "lp": (True, True),
    "l": (True, False),
    "p": (False, True),
}


class SearchConfig(BaseModel):
    """演示引导的 MCTS 计划搜索参数。"""
    gamma: float = Field(0.95, gt=0, le=1, description="折扣因子需在(0, 1]之间")
    c_ucb: float = Field(math.sqrt(2), gt=0)
    budget: int = Field(5000, ge=1, description="扩展步数上限")
    k: int = Field(5, ge=1, description="返回的计划条数")
    use_library: bool = True
    use_pruner: bool = True
    iou_threshold: float = Field(0.75, gt=0, lt=1)
    max_depth: int = Field(64, ge=1)
    # 已找到完整匹配路径后，连续这么多次扩展没有改进就提前结束；None 表示跑满预算
    patience: Optional[int] = Field(300, ge=1)
    seed: int = 0

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "SearchConfig":
        """按 lp / l / p 变体构造配置。"""
        if variant not in VARIANTS:
            raise ValueError(f"未知的搜索变体: {variant}，可选 {sorted(VARIANTS)}")
        use_library, use_pruner = VARIANTS[variant]
        return cls(use_library=use_library, use_pruner=use_pruner, **overrides)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.use_library, self.use_pruner):
                return name
        return "none"


class PlannerConfig(BaseModel):
    """目标条件前向搜索参数。"""
    max_expansions: int = Field(20000, gt=0)
    max_place_random: int = Field(3, gt=0, description="单个计划中 PlaceRandom 的上限")
    # 关闭后 Move 不再要求严格降低启发式，用于和贪心剪枝对照
    greedy_pruning: bool = True
    seed: int = 0
    iou_threshold: float = Field(0.75, gt=0, lt=1)


class GeneralizeConfig(BaseModel):
    """计划到程序的归纳参数。"""
    max_preamble: int = Field(4, ge=0)
    max_postamble: int = Field(4, ge=0)
    max_body: int = Field(8, ge=1)
    attempts: int = Field(3, ge=1, description="每个计划束的合成尝试次数")
    max_candidates_per_attempt: int = Field(16, ge=1)
    seed: int = 0
    diagnostics_file: Optional[str] = None


class SceneGraphConfig(BaseModel):
    iou_threshold: float = Field(0.75, gt=0, lt=1)


class CorpusConfig(BaseModel):
    """数据集生成参数。"""
    table_extent: Tuple[float, float, float, float] = (0.0, 0.0, 20.0, 20.0)
    demos_per_structure: int = Field(3, ge=1)
    max_distractors: int = Field(5, ge=0)
    colors: List[str] = Field(default_factory=lambda: [
        "red", "green", "blue", "yellow", "cyan", "white", "orange", "purple",
    ])
    shapes: List[str] = Field(default_factory=lambda: ["cube", "dice", "lego"])
    eval_sizes: List[int] = Field(default_factory=lambda: list(range(3, 11)))

    @field_validator("table_extent")
    @classmethod
    def _check_extent(cls, value):
        x_min, y_min, x_max, y_max = value
        if x_max - x_min < 1 or y_max - y_min < 1:
            raise ValueError("桌面尺寸至少要容纳一个方块")
        return value


class LoggingConfig(BaseModel):
    level: str = "INFO"
    file: Optional[str] = None


class BackendSettings(BaseSettings):
    """
    可选的文本补全后端，从环境变量读取，例如 SPG_BACKEND_URL。
    url 为空时只走确定性的离线路径。
    """
    model_config = SettingsConfigDict(env_prefix="SPG_BACKEND_")

    url: Optional[str] = None
    timeout_seconds: float = Field(30.0, gt=0)
    completions: int = Field(3, ge=1)

    @property
    def enabled(self) -> bool:
        return bool(self.url)


class AppConfig(BaseModel):
    # 嵌套模型，Pydantic 会自动递归解析；每一节都有默认值，空文件也合法
    search: SearchConfig = Field(default_factory=SearchConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    generalize: GeneralizeConfig = Field(default_factory=GeneralizeConfig)
    scene_graph: SceneGraphConfig = Field(default_factory=SceneGraphConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


# 2. 配置加载：带缓存的函数，而不是单例类
@lru_cache(maxsize=None)
def get_config(config_path: Optional[str] = None) -> AppConfig:
    """
    从 YAML 文件加载、解析并验证配置。
    使用 lru_cache 实现单例效果，确保配置文件只被读取和解析一次。

    Args:
        config_path: 配置文件路径；环境变量 SPG_CONFIG_PATH 优先。
            两者都没有时返回全默认配置。

    Raises:
        FileNotFoundError: 指定的文件不存在。
        ValueError: YAML 格式错误。
        RuntimeError: 其他加载或校验错误。
    """
    env_path = os.getenv("SPG_CONFIG_PATH", config_path)
    if env_path is None:
        return AppConfig()

    if not os.path.exists(env_path):
        raise FileNotFoundError(f"配置文件未找到: {env_path}")

    try:
        with open(env_path, 'r', encoding='utf-8') as f:
            raw_config = yaml.safe_load(f) or {}

        return AppConfig.model_validate(raw_config)

    except yaml.YAMLError as e:
        raise ValueError(f"YAML 格式错误: {e}")
    except Exception as e:
        # Pydantic 的 ValidationError 会指出具体字段，例如 "search -> gamma"
        raise RuntimeError(f"加载配置时出错: {e}")
