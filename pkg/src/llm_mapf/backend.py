"""Chat backends and token accounting.

A backend turns a message history into one assistant reply. Three kinds
exist: an HTTP chat-completions client, a scripted replayer for
deterministic tests, and an oracle agent that answers with a classic
planner's moves.
"""

from __future__ import annotations

import base64
import logging
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .grid import Coord, GridMap, Instance, JointConfig
from .prompting import Message, Mode, ParseError, format_config, parse_response
from .search import PlanningError, prioritized_plan_with_restarts

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0
DEFAULT_SEED = 42
API_KEY_ENV = "MAPF_LLM_API_KEY"


class BackendError(RuntimeError):
    """Unrecoverable backend failure."""


class RateLimitError(BackendError):
    """Provider refused the request for rate or context-size reasons; restart the session."""


class ScriptExhausted(BackendError):
    pass


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def context_estimate(tokens_per_agent_step: int, steps: int, agents: int) -> int:
    if min(tokens_per_agent_step, steps, agents) < 0:
        raise ValueError("inputs must be non-negative")
    return tokens_per_agent_step * steps * agents


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: Usage) -> Usage:
        return Usage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens)


@dataclass
class Reply:
    text: str
    usage: Usage
    estimated: bool = False


class Backend(Protocol):
    name: str

    def complete(self, messages: Sequence[Message], model: str, temperature: float, seed: int) -> Reply: ...


def estimate_usage(messages: Sequence[Message], reply_text: str) -> Usage:
    return Usage(sum(estimate_tokens(m.text) for m in messages), estimate_tokens(reply_text))


@dataclass
class ChatSession:
    backend: Backend
    model_id: str
    temperature: float = DEFAULT_TEMPERATURE
    rng_seed: int = DEFAULT_SEED
    history: list[Message] = field(default_factory=list)
    usage: Usage = field(default_factory=Usage)

    def send(self, msg: Message) -> tuple[str, Usage]:
        """Append ``msg``, query the backend, append the reply.

        On error the history is left unchanged.
        """
        if msg.role == "system":
            if self.history:
                raise ValueError("system message must come first")
            self.history.append(msg)
            return "", Usage()
        if self.history and self.history[-1].role == "user":
            raise ValueError("cannot send two user messages in a row")
        pending = [*self.history, msg]
        reply = self.backend.complete(pending, self.model_id, self.temperature, self.rng_seed)
        self.history.extend([msg, Message("assistant", reply.text)])
        self.usage = self.usage + reply.usage
        return reply.text, reply.usage


class RateLimiter:
    """Minimum spacing between requests, shared across threads."""

    def __init__(self, requests_per_minute: float | None = None):
        self.interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            time.sleep(wait)


# -- scripted ---------------------------------------------------------------


class ScriptedBackend:
    """Replays canned responses in order.

    When the script runs out, ``fallback`` answers instead, or
    :class:`ScriptExhausted` is raised. A response may be an exception
    instance, which is raised at that point.
    """

    name = "scripted"

    def __init__(self, responses: Sequence[str | BaseException], fallback: Backend | None = None):
        self.responses = list(responses)
        self.position = 0
        self.fallback = fallback

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.responses)

    def complete(self, messages, model, temperature, seed) -> Reply:
        if self.exhausted:
            if self.fallback is not None:
                return self.fallback.complete(messages, model, temperature, seed)
            raise ScriptExhausted(f"script of {len(self.responses)} responses exhausted")
        item = self.responses[self.position]
        self.position += 1
        if isinstance(item, BaseException):
            raise item
        return Reply(item, estimate_usage(messages, item), estimated=True)


class CyclingBackend:
    """Endless scripted backend: repeats ``responses`` in a loop."""

    name = "cycling"

    def __init__(self, responses: Sequence[str]):
        if not responses:
            raise ValueError("need at least one response")
        self.responses = list(responses)
        self.position = 0

    def complete(self, messages, model, temperature, seed) -> Reply:
        text = self.responses[self.position % len(self.responses)]
        self.position += 1
        return Reply(text, estimate_usage(messages, text), estimated=True)


# -- oracle -----------------------------------------------------------------

_SCENARIO_LINE = re.compile(
    r"^Agent (\d+) is currently in \((-?\d+),(-?\d+)\), and wants to go to \((-?\d+),(-?\d+)\)\.$"
)


def scenario_from_prompt(text: str) -> tuple[list[Coord], list[Coord]]:
    starts: list[Coord] = []
    goals: list[Coord] = []
    for line in text.splitlines():
        m = _SCENARIO_LINE.match(line.strip())
        if m:
            if int(m.group(1)) != len(starts) + 1:
                raise ValueError("scenario lines out of order")
            starts.append(Coord(int(m.group(2)), int(m.group(3))))
            goals.append(Coord(int(m.group(4)), int(m.group(5))))
    if not starts:
        raise ValueError("no scenario lines in prompt")
    return starts, goals


class OracleAgent:
    """Answers like a flawless model by following a classic planner.

    The agent reads the scenario from the first user message of the session
    and replays the conversation to find the agents' current positions: an
    assistant answer counts as executed when the next user message starts
    with "Good job". It then emits the planner's next configuration in the
    final-answer format. Plans are cached per (positions, goals).
    """

    name = "oracle"

    def __init__(self, grid_map: GridMap, planner_attempts: int = 20, seed: int = 0):
        self.map = grid_map
        self.planner_attempts = planner_attempts
        self.seed = seed
        self._next: dict[tuple[JointConfig, JointConfig], JointConfig] = {}
        self._plans: dict[tuple[JointConfig, JointConfig], list[JointConfig]] = {}

    def plan(self, config: JointConfig, goals: JointConfig) -> list[JointConfig]:
        key = (config, goals)
        if key not in self._plans:
            inst = Instance(self.map, config, goals)
            try:
                steps = list(prioritized_plan_with_restarts(inst, self.planner_attempts, self.seed).steps)
            except PlanningError as e:
                raise BackendError(f"oracle planner failed: {e}") from e
            for k, c in enumerate(steps):
                self._plans.setdefault((c, goals), steps[k:])
                if k + 1 < len(steps):
                    self._next.setdefault((c, goals), steps[k + 1])
        return self._plans[key]

    def _state(self, messages: Sequence[Message]) -> tuple[JointConfig, JointConfig, Mode]:
        users = [m for m in messages if m.role == "user"]
        if not users:
            raise BackendError("oracle needs a scenario prompt")
        system = next((m.text for m in messages if m.role == "system"), "")
        mode = Mode.OS if "complete step-by-step plan" in system else Mode.SBS
        starts, goals = scenario_from_prompt(users[0].text)
        config = tuple(starts)
        for prev, nxt in zip(messages, messages[1:]):
            if prev.role == "assistant" and nxt.role == "user" and nxt.text.startswith("Good job"):
                try:
                    config = parse_response(prev.text, len(starts), Mode.SBS)
                except ParseError as e:
                    raise BackendError(f"oracle cannot replay its own answer: {e}") from e
        return config, tuple(goals), mode

    def complete(self, messages, model, temperature, seed) -> Reply:
        config, goals, mode = self._state(messages)
        if mode is Mode.OS:
            steps = self.plan(config, goals)[1:] or [config]
            text = "\n\n".join(f"Step {t}:\n{format_config(c)}" for t, c in enumerate(steps, start=1))
        else:
            self.plan(config, goals)
            nxt = self._next.get((config, goals), config)
            text = "After the move, the coordinates of the agents are:\n" + format_config(nxt)
        return Reply(text, estimate_usage(messages, text), estimated=True)


# -- HTTP -------------------------------------------------------------------


def message_to_wire(m: Message) -> dict:
    if m.image is None:
        return {"role": m.role, "content": m.text}
    b64 = base64.b64encode(m.image.to_png()).decode("ascii")
    return {
        "role": m.role,
        "content": [
            {"type": "text", "text": m.text},
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
        ],
    }


def build_request(messages: Sequence[Message], model: str, temperature: float, seed: int) -> dict:
    return {
        "model": model,
        "messages": [message_to_wire(m) for m in messages],
        "temperature": temperature,
        "seed": seed,
    }


class HttpChatBackend:
    """Chat-completions client with bounded exponential backoff.

    Transport errors and 5xx responses are retried. 429 and context-length
    errors raise :class:`RateLimitError` at once so the caller can restart.
    """

    name = "http"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 4,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        limiter: RateLimiter | None = None,
        client=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import httpx

        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.limiter = limiter or RateLimiter()
        self.client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, messages, model, temperature, seed) -> Reply:
        import httpx

        body = build_request(messages, model, temperature, seed)
        delay = self.backoff
        for attempt in range(self.max_retries + 1):
            self.limiter.acquire()
            try:
                resp = self.client.post(self.url, json=body, headers=self._headers())
            except httpx.TransportError as e:
                err: str = f"transport error: {e}"
            else:
                if resp.status_code == 429:
                    raise RateLimitError(f"rate limited: {resp.text[:200]}")
                if resp.status_code == 400 and "context_length" in resp.text:
                    raise RateLimitError(f"context length exceeded: {resp.text[:200]}")
                if resp.status_code < 500:
                    if resp.status_code >= 400:
                        raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    return self._parse(resp.json(), messages)
                err = f"HTTP {resp.status_code}"
            if attempt == self.max_retries:
                raise BackendError(f"giving up after {attempt + 1} attempts: {err}")
            wait = min(delay, self.max_backoff) * (1 + random.random() * 0.1)
            log.warning("%s; retrying in %.1fs", err, wait)
            self._sleep(wait)
            delay *= 2
        raise AssertionError("unreachable")

    @staticmethod
    def _parse(data: dict, messages: Sequence[Message]) -> Reply:
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed response body: {e}") from e
        usage = data.get("usage")
        if usage and "prompt_tokens" in usage:
            return Reply(text, Usage(int(usage["prompt_tokens"]), int(usage.get("completion_tokens", 0))))
        return Reply(text, estimate_usage(messages, text), estimated=True)
