import numpy as np
import pytest
import torch

from alcot.config import ModelConfig
from alcot.data import ByteTokenizer, make_windows, synthetic_text
from alcot.model import LatentLM


def make_model(seed=0, router_std=0.0, **overrides):
    """Tiny random model; ``router_std > 0`` gives the router non-trivial weights."""
    kw = dict(vocab_size=259, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_latent=3)
    kw.update(overrides)
    torch.manual_seed(seed)
    model = LatentLM(ModelConfig(**kw))
    if router_std:
        with torch.no_grad():
            for p in model.router.parameters():
                p.normal_(0.0, router_std)
    return model


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture(scope="session")
def toy_windows():
    ids = np.array(ByteTokenizer().encode(synthetic_text(20_000, seed=7)))
    return make_windows(ids, 33)


# -- acceptance summary: one line per criterion at the end of the session -----------

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the current criterion's summary line."""
    def _set(text):
        _CRITERIA.setdefault(request.node.nodeid, {})["detail"] = text
    return _set


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(item.nodeid, {})
    entry["name"] = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["passed"] = rep.passed


def pytest_terminal_summary(terminalreporter):
    rows = [e for e in _CRITERIA.values() if "name" in e and "passed" in e]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for e in rows:
        status = "PASS" if e["passed"] else "FAIL"
        extra = f"  ({e['detail']})" if e.get("detail") else ""
        terminalreporter.write_line(f"{status}  {e['name']}{extra}")
