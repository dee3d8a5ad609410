"""JSON-over-HTTP POST with the package's fixed retry policy."""

from __future__ import annotations

import logging
import time
from typing import Callable

import httpx

from .errors import ProtocolError, ProviderError

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3
BACKOFF_START = 1.0
RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: dict | None = None,
    *,
    attempts: int = MAX_ATTEMPTS,
    backoff: float = BACKOFF_START,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Retries transport errors, 429 and 5xx with exponential backoff
    (``backoff``, ``2*backoff``, ...). Anything else fails immediately.
    """
    last = "no attempt made"
    for attempt in range(1, attempts + 1):
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last = f"transport error: {exc!r}"
        else:
            if resp.status_code < 400:
                if not resp.content:
                    raise ProtocolError(f"empty response body from {url}", attempt)
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"non-JSON response from {url}: {exc}", attempt) from exc
            if resp.status_code not in RETRY_STATUS:
                raise ProviderError(
                    f"HTTP {resp.status_code} from {url}: {resp.text[:200]}", attempt
                )
            last = f"HTTP {resp.status_code}"
        if attempt < attempts:
            delay = backoff * 2 ** (attempt - 1)
            log.warning("%s from %s; retrying in %.1fs", last, url, delay)
            sleep(delay)
    raise ProviderError(f"{url}: {last}", attempts)
