import hypothesis
import pytest

from pfgkit.providers import MockProvider

hypothesis.settings.register_profile(
    "ci", max_examples=60, derandomize=True, deadline=None
)
hypothesis.settings.load_profile("ci")

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


class ScriptedChatProvider(MockProvider):
    """Mock provider whose chat responses come from a supplied function."""

    name = "scripted"

    def __init__(self, chat_fn, **kwargs):
        super().__init__(**kwargs)
        self._chat_fn = chat_fn

    def chat_raw(self, req):
        text = self._chat_fn(req)
        return text, len(req.user_prompt.split()), len(text.split())


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly if anything attempts an HTTP call."""

    def boom(*args, **kwargs):
        raise AssertionError("network call attempted during an offline test")

    import requests

    monkeypatch.setattr(requests.Session, "request", boom)
    monkeypatch.setattr(requests, "request", boom)
