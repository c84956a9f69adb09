import asyncio
import logging
from typing import Iterable, List, Optional

import aiofiles
import aiohttp

from .config_manager import BackendSettings

# 获取日志记录器实例，假设日志配置已由 logger_config.py 处理
logger = logging.getLogger(__name__)


class CompletionBackend:
    """
    可选的文本补全后端客户端，负责草图解析和程序归纳两处的补全请求。

    请求体为 {"prompt": str, "n": int}，响应体为 {"completions": [str, ...]}
    （也接受 {"choices": [{"text": str}, ...]}）。任何网络或格式错误都只记日志并返回空列表，
    离线的确定性路径不受影响。
    """

    def __init__(self, settings: Optional[BackendSettings] = None,
                 session: Optional[aiohttp.ClientSession] = None):
        """
        初始化 CompletionBackend。

        Args:
            settings: 后端配置；默认从 SPG_BACKEND_* 环境变量读取。
            session: 外部传入的会话；为 None 时每次请求临时创建。
        """
        self.settings = settings or BackendSettings()
        self._session = session
        if self.enabled:
            logger.info("CompletionBackend initialized with endpoint: %s", self.settings.url)

    @property
    def enabled(self) -> bool:
        return self.settings.enabled

    async def _post(self, session: aiohttp.ClientSession, payload: dict) -> dict:
        timeout = aiohttp.ClientTimeout(total=self.settings.timeout_seconds)
        async with session.post(self.settings.url, json=payload, timeout=timeout) as response:
            response.raise_for_status()
            return await response.json(content_type=None)

    async def complete(self, prompt: str, n: Optional[int] = None) -> List[str]:
        """
        请求 n 个补全。

        Args:
            prompt: 提示文本。
            n: 补全个数，默认取配置中的 completions。

        Returns:
            补全文本列表；后端未配置或出错时为空列表。
        """
        if not self.enabled:
            return []
        payload = {"prompt": prompt, "n": n or self.settings.completions}
        try:
            if self._session is not None:
                data = await self._post(self._session, payload)
            else:
                async with aiohttp.ClientSession() as session:
                    data = await self._post(session, payload)
            completions = _extract_completions(data)
            logger.info("Fetched %d completions from backend.", len(completions))
            return completions
        except (aiohttp.ClientError, asyncio.TimeoutError, ValueError) as e:
            logger.error("Error requesting completions from %s: %s", self.settings.url, e, exc_info=True)
            return []


def _extract_completions(data) -> List[str]:
    if isinstance(data, dict):
        if isinstance(data.get("completions"), list):
            return [str(c) for c in data["completions"]]
        if isinstance(data.get("choices"), list):
            return [str(c.get("text", "")) for c in data["choices"] if isinstance(c, dict)]
    raise ValueError(f"unexpected backend response shape: {type(data).__name__}")


async def write_diagnostics(path: str, lines: Iterable[str]) -> None:
    """把候选程序的规范文本追加写入诊断文件，每行一个。"""
    async with aiofiles.open(path, "a", encoding="utf-8") as f:
        for line in lines:
            await f.write(line + "\n")
