"""Pluggable text-generation clients: request text in, response text out."""

import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence, Union

import httpx
from groq import Groq

from .config import config

logger = logging.getLogger(__name__)

CLIENT_KINDS = ("http", "groq", "echo", "fixture")


class ClientError(Exception):
    """Raised when a text-generation request fails."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class TextClient:
    """Interface of every client."""

    def complete(self, text: str) -> str:
        raise NotImplementedError


class EchoClient(TextClient):
    """Returns the request verbatim."""

    def complete(self, text: str) -> str:
        return text


class FixtureClient(TextClient):
    """Replays recorded responses in order."""

    def __init__(self, responses: Union[Sequence[str], str, Path]):
        """
        Args:
            responses: Response texts, or a JSON file holding a list of them
        """
        if isinstance(responses, (str, Path)):
            path = Path(responses)
            if not path.is_file():
                raise ClientError(f"Fixture file not found: {path}")
            try:
                responses = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ClientError(f"Fixture file {path} is not valid JSON: {e}")
            if not isinstance(responses, list) or not all(isinstance(r, str) for r in responses):
                raise ClientError(f"Fixture file {path} must hold a list of strings")
        self.responses: List[str] = list(responses)
        self.requests: List[str] = []

    def complete(self, text: str) -> str:
        if len(self.requests) >= len(self.responses):
            raise ClientError(f"Fixture exhausted after {len(self.responses)} responses")
        self.requests.append(text)
        return self.responses[len(self.requests) - 1]


class HttpTextClient(TextClient):
    """POSTs the request as plain text to a single endpoint."""

    def __init__(self, base_url: str = None, timeout: float = None):
        self.base_url = base_url or config.client.base_url
        self.timeout = timeout or config.client.timeout

    def complete(self, text: str) -> str:
        """
        Send one request.

        Raises:
            ClientError: On transport failure or a non-2xx status
        """
        try:
            response = httpx.post(
                self.base_url,
                content=text.encode("utf-8"),
                headers={"Content-Type": "text/plain; charset=utf-8"},
                timeout=self.timeout,
            )
            response.raise_for_status()
        except httpx.HTTPError as e:
            raise ClientError(f"Request to {self.base_url} failed: {str(e)}")
        return response.text


class GroqTextClient(TextClient):
    """Chat completion via the Groq API."""

    def __init__(self, api_key: Optional[str] = None, model: str = None):
        """
        Initialize client.

        Args:
            api_key: Groq API key (defaults to GROQ_API_KEY env var)
            model: Chat model to use (default from config)
        """
        self.api_key = api_key or os.getenv("GROQ_API_KEY")
        if not self.api_key:
            raise ValueError(
                "Groq API key not provided. Set GROQ_API_KEY environment variable "
                "or pass api_key parameter."
            )

        self.model = model or config.client.groq_model
        self.client = Groq(api_key=self.api_key)

    def complete(self, text: str) -> str:
        try:
            completion = self.client.chat.completions.create(
                model=self.model,
                messages=[{"role": "user", "content": text}],
            )
            return completion.choices[0].message.content.strip()
        except Exception as e:
            raise ClientError(f"Completion failed: {str(e)}")


def request_with_retry(client: TextClient, text: str, retries: int = None) -> str:
    """
    Send ``text`` with bounded retry.

    Args:
        client: Any text client
        text: Request text
        retries: Extra attempts after the first (default from config)

    Returns:
        Response text

    Raises:
        ClientError: After the last failed attempt, with the attempt count
    """
    retries = config.client.max_retries if retries is None else retries
    attempts = retries + 1
    last_error = None
    for attempt in range(1, attempts + 1):
        try:
            response = client.complete(text)
            logger.info(f"{type(client).__name__}: request of {len(text)} chars answered on attempt {attempt}")
            return response
        except ClientError as e:
            last_error = e
            if attempt < attempts:
                logger.warning(f"Attempt {attempt}/{attempts} failed: {e}; retrying")
    raise ClientError(f"Request failed after {attempts} attempts: {last_error}", attempts=attempts)


def make_client(
    kind: str = "http",
    base_url: Optional[str] = None,
    fixture: Optional[Union[str, Path]] = None
) -> TextClient:
    """
    Build a client by name.

    The ``COMPVID_CLIENT_URL`` environment variable, when set, wins over
    ``base_url``.
    """
    if kind not in CLIENT_KINDS:
        raise ValueError(f"unknown client '{kind}', expected one of {CLIENT_KINDS}")
    if kind == "echo":
        return EchoClient()
    if kind == "fixture":
        if fixture is None:
            raise ValueError("fixture client needs a fixture file")
        return FixtureClient(fixture)
    if kind == "groq":
        return GroqTextClient()
    return HttpTextClient(base_url=os.getenv("COMPVID_CLIENT_URL") or base_url)
