"""Chat-completions client for remote teacher and judge models."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import httpx

log = logging.getLogger(__name__)

DEFAULT_TOKEN_ENV = "CLSGEN_API_TOKEN"


class TransportError(RuntimeError):
    """The endpoint could not be reached or kept failing after retries."""


@dataclass
class ChatClient:
    base_url: str
    model: str
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    transport: httpx.BaseTransport | None = None

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def payload(self, messages: list[dict], temperature: float, max_tokens: int) -> dict:
        return {"model": self.model, "messages": messages, "temperature": temperature,
                "max_tokens": max_tokens}

    def complete(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = 384) -> str:
        """Send one request; retry transport errors, 429 and 5xx with exponential backoff."""
        url = self.base_url.rstrip("/") + "/v1/chat/completions"
        body = self.payload(messages, temperature, max_tokens)
        last: Exception | None = None
        with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
            for attempt in range(self.max_retries + 1):
                try:
                    resp = client.post(url, json=body, headers=self._headers())
                    if resp.status_code == 429 or resp.status_code >= 500:
                        raise TransportError(f"HTTP {resp.status_code}")
                    resp.raise_for_status()
                    return extract_text(resp.json())
                except (httpx.TransportError, TransportError) as exc:
                    last = exc
                    if attempt < self.max_retries:
                        delay = self.backoff * 2 ** attempt
                        log.warning("chat request failed (%s); retry in %.1fs", exc, delay)
                        time.sleep(delay)
        raise TransportError(f"{url}: giving up after {self.max_retries + 1} attempts: {last}")


def extract_text(response: dict) -> str:
    try:
        content = response["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError("malformed chat-completions response") from None
    return content or ""
