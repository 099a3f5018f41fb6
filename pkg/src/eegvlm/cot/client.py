"""VLM clients, response caching and retrying queries."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

import numpy as np

from ..errors import MalformedResponse, ServiceUnavailable, TransientServiceError
from ..stages import Stage
from .prompts import PROFILES, SubPrompt

log = logging.getLogger(__name__)

API_KEY_ENV = "EEGVLM_API_KEY"
_EVIDENCE = re.compile(r"evidence\s*:\s*(present|absent)", re.IGNORECASE)


class VLMClient(Protocol):
    model_id: str

    def complete(self, image_png: bytes, prompt: SubPrompt) -> str: ...


def image_digest(image_png: bytes) -> str:
    return hashlib.sha256(image_png).hexdigest()


@dataclass(frozen=True)
class StageAnalysis:
    stage: Stage
    analysis_text: str
    evidence_flag: bool


def parse_analysis(stage: Stage, text: object) -> StageAnalysis:
    if not isinstance(text, str) or not text.strip():
        raise MalformedResponse(f"empty or non-text answer for stage {stage}")
    found = _EVIDENCE.findall(text)
    evidence = bool(found) and found[-1].lower() == "present"
    return StageAnalysis(stage, text.strip(), evidence)


# ---------------------------------------------------------------- cache


class ResponseCache:
    """Content-addressed answer cache with per-key single-flight.

    Keys combine image digest, prompt digest and model id. With a
    directory the entries persist as one JSON file each.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    @staticmethod
    def key(image_digest_: str, prompt: SubPrompt, model_id: str) -> str:
        return hashlib.sha256(f"{image_digest_}|{prompt.digest()}|{model_id}".encode()).hexdigest()

    def key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self.directory:
            path = self.directory / f"{key}.json"
            if path.exists():
                text = json.loads(path.read_text())["answer"]
                with self._lock:
                    self._mem[key] = text
                return text
        return None

    def put(self, key: str, text: str) -> None:
        with self._lock:
            self._mem[key] = text
        if self.directory:
            tmp = self.directory / f"{key}.json.tmp"
            tmp.write_text(json.dumps({"answer": text}))
            tmp.replace(self.directory / f"{key}.json")

    def __len__(self) -> int:
        return len(self._mem)


def query_vlm(
    client: VLMClient,
    image_png: bytes,
    prompt: SubPrompt,
    *,
    cache: ResponseCache | None = None,
    retries: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> StageAnalysis:
    """Ask ``client`` one stage question, retrying transient failures.

    Waits ``backoff_s * 2**k`` before retry ``k``. Raises
    ``ServiceUnavailable`` once ``retries`` retries are used up.
    """
    digest = image_digest(image_png)
    key = ResponseCache.key(digest, prompt, client.model_id) if cache is not None else ""
    if cache is not None:
        with cache.key_lock(key):
            text = cache.get(key)
            if text is None:
                text = _query_with_retries(client, image_png, prompt, retries, backoff_s, sleep)
                parse_analysis(prompt.stage, text)  # do not cache malformed answers
                cache.put(key, text)
    else:
        text = _query_with_retries(client, image_png, prompt, retries, backoff_s, sleep)
    return parse_analysis(prompt.stage, text)


def _query_with_retries(client, image_png, prompt, retries, backoff_s, sleep) -> str:
    for attempt in range(retries + 1):
        try:
            return client.complete(image_png, prompt)
        except TransientServiceError as exc:
            if attempt == retries:
                raise ServiceUnavailable(f"{client.model_id}: gave up after {retries} retries: {exc}") from exc
            delay = backoff_s * 2**attempt
            log.warning("transient VLM failure (%s), retry %d in %.2fs", exc, attempt + 1, delay)
            sleep(delay)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------- clients


class HttpVLMClient:
    """JSON-over-HTTP client.

    Request body: ``{"model", "image" (base64 PNG), "prompt"}``; response
    body: ``{"answer"}``. The bearer token comes from ``EEGVLM_API_KEY``.
    """

    def __init__(
        self,
        url: str,
        model_id: str,
        *,
        timeout_s: float = 60.0,
        min_interval_s: float = 0.0,
        api_key: str | None = None,
        transport=None,
    ):
        import httpx

        self.url = url
        self.model_id = model_id
        self.min_interval_s = min_interval_s
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(timeout=timeout_s, headers=headers, transport=transport)
        self._httpx = httpx
        self._rate_lock = threading.Lock()
        self._last = 0.0

    def _throttle(self) -> None:
        with self._rate_lock:
            wait = self._last + self.min_interval_s - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def complete(self, image_png: bytes, prompt: SubPrompt) -> str:
        body = {
            "model": self.model_id,
            "image": base64.b64encode(image_png).decode("ascii"),
            "prompt": prompt.prompt_text,
        }
        self._throttle()
        try:
            resp = self._http.post(self.url, json=body)
        except (self._httpx.TimeoutException, self._httpx.TransportError) as exc:
            raise TransientServiceError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientServiceError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ServiceUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            answer = resp.json()["answer"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"response lacks an 'answer' field: {resp.text[:200]}") from exc
        if not isinstance(answer, str):
            raise MalformedResponse("'answer' is not text")
        return answer


def canned_analysis(stage: Stage, present: bool) -> str:
    desc = " and ".join(PROFILES[stage].descriptors)
    if present:
        return f"{desc} clearly visible.\nEvidence: present"
    return f"no clear {desc}.\nEvidence: absent"


class MockVLMClient:
    """Deterministic offline client.

    ``answer(image_digest, stage) -> text`` decides every response; see the
    ``oracle``/``silent``/``noisy`` constructors for the usual variants.
    """

    def __init__(self, answer: Callable[[str, Stage], str], model_id: str = "mock"):
        self._answer = answer
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, image_png: bytes, prompt: SubPrompt) -> str:
        with self._lock:
            self.calls += 1
        return self._answer(image_digest(image_png), prompt.stage)

    @classmethod
    def from_table(cls, table: Mapping[tuple[str, Stage], str], model_id: str = "mock-table"):
        def answer(digest, stage):
            try:
                return table[(digest, stage)]
            except KeyError:
                raise MalformedResponse(f"no canned answer for {digest[:12]}/{stage}") from None

        return cls(answer, model_id)

    @classmethod
    def oracle(cls, truth: Mapping[str, Stage], model_id: str = "mock-oracle"):
        """Reports evidence exactly for the true stage of each image digest."""
        return cls(lambda d, s: canned_analysis(s, truth[d] == s), model_id)

    @classmethod
    def silent(cls, model_id: str = "mock-silent"):
        """Describes the image but never commits to any stage evidence."""
        return cls(lambda d, s: "The trace is visible but I cannot judge the waveform features.", model_id)

    @classmethod
    def noisy(cls, truth: Mapping[str, Stage], error_rate: float, seed: int = 0, model_id: str = "mock-noisy"):
        """Oracle whose per-(image, stage) evidence flips with probability ``error_rate``."""

        def answer(d, s):
            h = hashlib.sha256(f"{seed}|{d}|{s.value}".encode()).digest()
            flip = np.frombuffer(h[:8], dtype="<u8")[0] / 2**64 < error_rate
            return canned_analysis(s, (truth[d] == s) != flip)

        return cls(answer, model_id)


class FlakyClient:
    """Wraps a client and raises ``TransientServiceError`` on its first ``failures`` calls."""

    def __init__(self, inner: VLMClient, failures: int):
        self.inner = inner
        self.model_id = inner.model_id
        self.remaining = failures
        self.calls = 0

    def complete(self, image_png: bytes, prompt: SubPrompt) -> str:
        self.calls += 1
        if self.remaining > 0:
            self.remaining -= 1
            raise TransientServiceError("injected fault")
        return self.inner.complete(image_png, prompt)
