"""LLM-judged state usefulness as an intrinsic reward.

Observations are reduced to a canonical object list, rendered into a fixed
prompt, and scored 0-10 by a language model. Scores are cached by prompt text
in a JSON-lines file so a prompt is only ever sent once.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

log = logging.getLogger(__name__)

PROMPT_VERSION = "doorkey-direct-v1"
DEFAULT_MISSION = "use the key to open the door and then get to the goal"
QUESTION = (
    "On a scale of 0 to 10, how much does this new state help the agent achieve its goal? "
    "Answer with a single integer."
)
_OBJECTS_PREFIX = "Objects the agent sees in the new state: "
_CARRYING_LINE = "The agent is carrying a key."
_NOT_CARRYING_LINE = "The agent is not carrying anything."


class ScoreParseError(ValueError):
    """The model's answer contains no integer between 0 and 10."""


class RewardAcquisitionError(RuntimeError):
    """No score could be obtained and no fallback is configured."""


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass
class LlmRewardConfig:
    endpoint: str | None = None
    model: str = "llama3.2"
    api_key_env: str = "LLM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    fallback_score: int | None = None
    temperature: float = 0.0
    max_tokens: int = 16
    backoff_initial: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.fallback_score is not None and not 0 <= self.fallback_score <= 10:
            raise ValueError("fallback_score must lie in 0..10")

    def resolved_endpoint(self) -> str:
        endpoint = self.endpoint or os.environ.get("LLM_API_BASE")
        if not endpoint:
            raise ValueError("no LLM endpoint: set 'endpoint' in the config or LLM_API_BASE")
        return endpoint.rstrip("/")


def build_prompt(objects: list[str], carrying: bool, mission: str = DEFAULT_MISSION) -> str:
    """Render the canonical prompt; identical inputs give byte-identical text."""
    if not mission:
        raise ValueError("mission text must be non-empty")
    seen = ", ".join(objects) if objects else "none"
    return "\n".join([
        "The agent is observing a grid environment in which it is located.",
        f'The agent\'s goal is: "{mission}".',
        f"{_OBJECTS_PREFIX}{seen}.",
        _CARRYING_LINE if carrying else _NOT_CARRYING_LINE,
        QUESTION,
    ])


_INT_TOKEN = re.compile(r"(?<![A-Za-z0-9])\d+(?![A-Za-z0-9])")


def parse_score(response: str) -> int:
    """First standalone integer token in 0..10, scanning left to right."""
    for match in _INT_TOKEN.finditer(response):
        value = int(match.group())
        if 0 <= value <= 10:
            return value
    raise ScoreParseError(f"no score in 0..10 found in {response!r}")


def _prompt_facts(prompt: str) -> tuple[set[str], bool]:
    objects: set[str] = set()
    carrying = False
    for line in prompt.splitlines():
        if line.startswith(_OBJECTS_PREFIX):
            listed = line[len(_OBJECTS_PREFIX):].rstrip(".")
            if listed != "none":
                objects = {item.strip() for item in listed.split(",")}
        elif line == _CARRYING_LINE:
            carrying = True
    return objects, carrying


def heuristic_mock_complete(prompt: str) -> str:
    """Deterministic stand-in for an LLM, scoring progress along key -> door -> goal."""
    objects, carrying = _prompt_facts(prompt)
    if "goal" in objects:
        return "10"
    if carrying and ({"door(locked)", "door(closed)"} & objects):
        return "9"
    if "key" in objects and not carrying:
        return "8"
    if "door(open)" in objects:
        return "8"
    if carrying:
        return "5"
    return "2"


class HeuristicMockClient:
    def complete(self, prompt: str) -> str:
        return heuristic_mock_complete(prompt)


class CountingClient:
    """Wraps a client and counts ``complete`` calls."""

    def __init__(self, inner: LlmClient):
        self.inner = inner
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self.inner.complete(prompt)


class HttpChatClient:
    """OpenAI-compatible ``/v1/chat/completions`` client.

    ``temperature=0`` is requested, but not every server honours it with
    fully deterministic output.
    """

    def __init__(self, cfg: LlmRewardConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self.base = cfg.resolved_endpoint()
        headers = {}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }
        resp = self._http.post(f"{self.base}/v1/chat/completions", json=body)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def check_reachable(self) -> None:
        """Raise ``RewardAcquisitionError`` if the server cannot be contacted at all."""
        try:
            self._http.get(f"{self.base}/v1/models")
        except httpx.HTTPError as exc:
            raise RewardAcquisitionError(f"LLM endpoint {self.base} unreachable: {exc}") from exc

    def close(self) -> None:
        self._http.close()


@dataclass
class PromptRecord:
    prompt: str
    raw_response: str
    score: int
    timestamp: int

    def to_line(self) -> str:
        return json.dumps({"prompt": self.prompt, "response": self.raw_response, "score": self.score,
                           "ts": self.timestamp}, ensure_ascii=False)

    @classmethod
    def from_line(cls, line: str) -> PromptRecord:
        data = json.loads(line)
        score = data["score"]
        if not isinstance(score, int) or not 0 <= score <= 10:
            raise ValueError(f"score out of range: {score!r}")
        if not isinstance(data["prompt"], str) or not isinstance(data["response"], str):
            raise ValueError("prompt and response must be strings")
        return cls(data["prompt"], data["response"], score, int(data["ts"]))


@dataclass
class PromptCache:
    entries: dict[str, PromptRecord] = field(default_factory=dict)
    backing_path: Path | None = None

    def get(self, prompt: str) -> PromptRecord | None:
        return self.entries.get(prompt)

    def put(self, record: PromptRecord) -> None:
        """Store a record and append it to the backing file, if any."""
        self.entries[record.prompt] = record
        if self.backing_path is not None:
            self.backing_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.backing_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_line() + "\n")

    def __len__(self) -> int:
        return len(self.entries)


def load_cache(path: str | Path | None) -> PromptCache:
    """Read a JSON-lines cache; a missing file gives an empty cache, bad lines are skipped."""
    if path is None or str(path) == "":
        return PromptCache()
    path = Path(path)
    cache = PromptCache(backing_path=path)
    if not path.exists():
        return cache
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = PromptRecord.from_line(line)
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("%s:%d: skipping corrupt cache line (%s)", path, lineno, exc)
                continue
            cache.entries[record.prompt] = record
    return cache


def save_cache(cache: PromptCache, path: str | Path | None = None) -> Path:
    """Rewrite the whole cache file (one record per line, insertion order)."""
    target = Path(path) if path is not None else cache.backing_path
    if target is None:
        raise ValueError("cache has no backing path")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in cache.entries.values():
            fh.write(record.to_line() + "\n")
    os.replace(tmp, target)
    return target


def score_state(cache: PromptCache, client: LlmClient, cfg: LlmRewardConfig, objects: list[str], carrying: bool,
                mission: str = DEFAULT_MISSION, sleep: Callable[[float], None] = time.sleep) -> float:
    """LLM usefulness of a state, as ``score / 10``.

    Cache hits never touch the client. On a miss the client is tried up to
    ``1 + cfg.max_retries`` times with exponential backoff; transport errors
    and unparseable answers both count as failures.
    """
    prompt = build_prompt(objects, carrying, mission)
    hit = cache.get(prompt)
    if hit is not None:
        return hit.score / 10

    delay = cfg.backoff_initial
    last_error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            sleep(delay)
            delay *= 2
        try:
            answer = client.complete(prompt)
            score = parse_score(answer)
        except (httpx.HTTPError, ScoreParseError, KeyError, IndexError, TypeError, ValueError) as exc:
            last_error = exc
            log.info("LLM attempt %d failed: %s", attempt + 1, exc)
            continue
        cache.put(PromptRecord(prompt, answer, score, int(time.time())))
        return score / 10

    if cfg.fallback_score is not None:
        log.warning("LLM scoring failed (%s); using fallback score %d", last_error, cfg.fallback_score)
        return cfg.fallback_score / 10
    raise RewardAcquisitionError(f"could not score prompt after {cfg.max_retries + 1} attempts: {last_error}")


class LlmScorer:
    """Callable bundling cache, client and config for the training loop."""

    def __init__(self, cache: PromptCache, client: LlmClient, cfg: LlmRewardConfig | None = None,
                 mission: str = DEFAULT_MISSION, sleep: Callable[[float], None] = time.sleep):
        self.cache = cache
        self.client = CountingClient(client)
        self.cfg = cfg or LlmRewardConfig()
        self.mission = mission
        self.sleep = sleep

    @property
    def calls(self) -> int:
        return self.client.calls

    def __call__(self, objects: list[str], carrying: bool) -> float:
        return score_state(self.cache, self.client, self.cfg, objects, carrying, self.mission, self.sleep)
