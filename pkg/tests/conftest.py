import pytest

from helpers import fig1
from syntaxlm.model import ModelConfig
from syntaxlm.training import TrainConfig, train
from syntaxlm.treebank import build_vocab


@pytest.fixture(scope="session")
def overfit_fig1():
    """Small TG model memorizing the example sentence."""
    vocab = build_vocab([fig1()])
    cfg = ModelConfig(len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32)
    lm, _ = train(cfg, vocab, [fig1()], [], TrainConfig(epochs=200, warmup_steps=10, lr=1e-2, eval_every=50))
    return lm


# ---------------------------------------------------------------------------
# Acceptance criteria: one summary line per criterion at the end of the run

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (call.when == "call" or report.failed):
        return
    number, title, budget = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "budget": budget, "passed": True, "detail": ""})
    entry["passed"] = entry["passed"] and report.passed
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    if details:
        entry["detail"] = "; ".join(details)
    elif report.failed:
        entry["detail"] = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "failed"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {e['title']} (budget {e['budget']} s): {e['detail']}")
