"""Shared JSON-over-HTTP client with bounded retries."""

from __future__ import annotations

import logging
import time
from typing import Any

import httpx

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """A remote service failed after retries, or answered with a malformed payload."""


class JsonClient:
    """POSTs JSON payloads, retrying 5xx responses and transport errors with exponential backoff.

    4xx responses are not retried; they indicate a request the server will never accept.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=httpx.Timeout(timeout, connect=5.0), transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}/{route.lstrip('/')}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self._client.post(url, json=payload)
            except httpx.TransportError as e:
                last = e
                logger.warning("POST %s failed (%s), attempt %d", url, e, attempt + 1)
                continue
            if response.status_code >= 500:
                last = BackendError(f"{url} returned HTTP {response.status_code}")
                logger.warning("POST %s returned %d, attempt %d", url, response.status_code, attempt + 1)
                continue
            if response.status_code >= 400:
                raise BackendError(f"{url} returned HTTP {response.status_code}: {response.text[:200]}")
            try:
                data = response.json()
            except ValueError as e:
                raise BackendError(f"{url} returned invalid JSON") from e
            if not isinstance(data, dict):
                raise BackendError(f"{url} returned {type(data).__name__}, expected an object")
            return data
        raise BackendError(f"{url} failed after {self.retries + 1} attempts: {last}") from last
