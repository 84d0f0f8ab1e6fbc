"""Tests for llm_client module."""

import json

import httpx
import pytest
from unittest.mock import MagicMock, patch

from src.llm_client import (
    ClientError,
    EchoClient,
    FixtureClient,
    GroqTextClient,
    HttpTextClient,
    make_client,
    request_with_retry,
)


class TestGroqTextClient:
    """Test GroqTextClient class."""

    @pytest.fixture
    def mock_groq(self):
        with patch('src.llm_client.Groq') as mock:
            yield mock

    @pytest.fixture
    def client(self, mock_groq):
        return GroqTextClient(api_key="test_key")

    def test_init_no_key(self):
        """Test initialization without API key."""
        with patch.dict('os.environ', clear=True):
            with pytest.raises(ValueError, match="Groq API key not provided"):
                GroqTextClient(api_key=None)

    def test_init_with_env_key(self):
        """Test initialization with environment variable."""
        with patch.dict('os.environ', {'GROQ_API_KEY': 'env_key'}):
            with patch('src.llm_client.Groq') as mock_groq:
                GroqTextClient()
                mock_groq.assert_called_with(api_key='env_key')

    def test_complete_success(self, client):
        """Test successful completion."""
        mock_response = MagicMock()
        mock_response.choices[0].message.content = "  Output: [...]  "
        client.client.chat.completions.create.return_value = mock_response

        result = client.complete("plan this")

        assert result == "Output: [...]"
        kwargs = client.client.chat.completions.create.call_args[1]
        assert kwargs['messages'] == [{"role": "user", "content": "plan this"}]

    def test_complete_api_error(self, client):
        """Test completion with API error."""
        client.client.chat.completions.create.side_effect = Exception("API Error")

        with pytest.raises(ClientError, match="Completion failed"):
            client.complete("plan this")


class TestHttpTextClient:
    """Test HttpTextClient class."""

    @patch('src.llm_client.httpx.post')
    def test_complete_success(self, mock_post):
        """Test the request body is sent as plain text."""
        mock_post.return_value = httpx.Response(
            200, text="Recaption: a dog", request=httpx.Request("POST", "http://llm.test/generate")
        )

        result = HttpTextClient(base_url="http://llm.test/generate").complete("expand: a dog")

        assert result == "Recaption: a dog"
        args, kwargs = mock_post.call_args
        assert args[0] == "http://llm.test/generate"
        assert kwargs['content'] == "expand: a dog".encode("utf-8")
        assert kwargs['headers']['Content-Type'].startswith("text/plain")

    @patch('src.llm_client.httpx.post')
    def test_http_error_status(self, mock_post):
        """Test a 500 response raises ClientError."""
        mock_post.return_value = httpx.Response(500, request=httpx.Request("POST", "http://llm.test/generate"))

        with pytest.raises(ClientError, match="failed"):
            HttpTextClient(base_url="http://llm.test/generate").complete("x")

    @patch('src.llm_client.httpx.post')
    def test_unreachable(self, mock_post):
        """Test a connection error raises ClientError."""
        mock_post.side_effect = httpx.ConnectError("connection refused")

        with pytest.raises(ClientError, match="connection refused"):
            HttpTextClient(base_url="http://127.0.0.1:9").complete("x")


class TestFixtureClient:
    """Test FixtureClient class."""

    def test_replays_in_order(self):
        """Test responses come back in recorded order."""
        client = FixtureClient(["one", "two"])

        assert client.complete("a") == "one"
        assert client.complete("b") == "two"
        assert client.requests == ["a", "b"]

    def test_exhausted(self):
        """Test running past the recording raises ClientError."""
        client = FixtureClient(["one"])
        client.complete("a")
        with pytest.raises(ClientError, match="exhausted"):
            client.complete("b")

    def test_from_file(self, tmp_path):
        """Test loading responses from a JSON file."""
        path = tmp_path / "responses.json"
        path.write_text(json.dumps(["recorded"]), encoding="utf-8")
        assert FixtureClient(path).complete("x") == "recorded"

    def test_missing_file(self, tmp_path):
        """Test a missing fixture file raises ClientError."""
        with pytest.raises(ClientError, match="not found"):
            FixtureClient(tmp_path / "missing.json")

    def test_bad_file(self, tmp_path):
        """Test a fixture file must hold a list of strings."""
        path = tmp_path / "responses.json"
        path.write_text(json.dumps({"a": 1}), encoding="utf-8")
        with pytest.raises(ClientError, match="list of strings"):
            FixtureClient(path)


class TestRetry:
    """Test request_with_retry."""

    def test_retries_then_succeeds(self):
        """Test a transient failure is retried."""
        client = MagicMock()
        client.complete.side_effect = [ClientError("down"), "ok"]

        assert request_with_retry(client, "x", retries=2) == "ok"
        assert client.complete.call_count == 2

    def test_gives_up(self):
        """Test the attempt count is reported after the last failure."""
        client = MagicMock()
        client.complete.side_effect = ClientError("down")

        with pytest.raises(ClientError, match="after 3 attempts") as exc:
            request_with_retry(client, "x", retries=2)
        assert exc.value.attempts == 3
        assert client.complete.call_count == 3

    def test_echo(self):
        """Test the echo client needs a single attempt."""
        assert request_with_retry(EchoClient(), "same text") == "same text"


class TestMakeClient:
    """Test client construction by name."""

    def test_kinds(self, tmp_path):
        """Test each local kind builds its client."""
        path = tmp_path / "f.json"
        path.write_text("[]", encoding="utf-8")
        assert isinstance(make_client("echo"), EchoClient)
        assert isinstance(make_client("fixture", fixture=path), FixtureClient)
        assert isinstance(make_client("http", base_url="http://x"), HttpTextClient)

    def test_unknown_kind(self):
        """Test unknown names are rejected."""
        with pytest.raises(ValueError, match="unknown client"):
            make_client("carrier-pigeon")

    def test_fixture_requires_file(self):
        """Test the fixture kind needs a path."""
        with pytest.raises(ValueError, match="fixture"):
            make_client("fixture")

    def test_env_url_wins(self):
        """Test COMPVID_CLIENT_URL overrides the explicit URL."""
        with patch.dict('os.environ', {'COMPVID_CLIENT_URL': 'http://env.test/gen'}):
            client = make_client("http", base_url="http://flag.test/gen")
        assert client.base_url == "http://env.test/gen"
