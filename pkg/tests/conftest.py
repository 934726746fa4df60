"""Shared fixtures: the overfit toy models and the acceptance summary."""

from __future__ import annotations

import dataclasses
import time

import pytest

from assetformer.model import NAMED_CONFIGS
from assetformer.pcg import TOY_PARAMS, distinct_caption_records, make_record
from assetformer.tokenizer import prepare
from assetformer.training import TrainConfig, evaluate_loss, train

# Largest toy building is 291 tokens; with the condition slots this leaves slack.
TOY_SEQ_LEN = 320
# name -> (steps, learning rate); found by the overfitting sanity runs
TOY_SCHEDULE = {"nano": (300, 2e-3), "mini": (200, 1e-3)}
HELD_OUT_SEED = 12345

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")
    config.stash[_ACCEPTANCE] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = f"error during {rep.when}: {call.excinfo.typename if call.excinfo else 'unknown'}"
    results = item.config.stash[_ACCEPTANCE]
    n = marker.args[0]
    ok = rep.passed and results.get(n, (True, ""))[0]
    results[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {detail}")


@dataclasses.dataclass
class ToyModel:
    model: object
    losses: list
    seconds: float


def train_toy(records, name: str, order: str | None = "dfs", dataset=None) -> ToyModel:
    ds = dataset if dataset is not None else prepare(records, order, 0)
    steps, lr = TOY_SCHEDULE[name]
    cfg = dataclasses.replace(NAMED_CONFIGS[name], max_seq_len=TOY_SEQ_LEN)
    t0 = time.perf_counter()
    res = train(ds, cfg, TrainConfig(learning_rate=lr, batch_size=16, total_steps=steps, warmup_steps=20, seed=0))
    model = res.checkpoint.model.eval()
    return ToyModel(model, res.losses, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def toy_records():
    return distinct_caption_records(16, TOY_PARAMS, 0)


@pytest.fixture(scope="session")
def held_out_records():
    return [make_record(TOY_PARAMS, HELD_OUT_SEED, i) for i in range(64)]


@pytest.fixture(scope="session")
def toy_dfs(toy_records):
    return prepare(toy_records, "dfs", 0)


@pytest.fixture(scope="session")
def toy_nano(toy_records) -> ToyModel:
    return train_toy(toy_records, "nano")


@pytest.fixture(scope="session")
def toy_mini(toy_records) -> ToyModel:
    return train_toy(toy_records, "mini")


@pytest.fixture(scope="session")
def toy_nano_raw(toy_records) -> ToyModel:
    return train_toy(toy_records, "nano", "raw")


def held_out_accuracy(model, held_out_records, order: str) -> float:
    return evaluate_loss(model, prepare(held_out_records, order, 1).records)["accuracy"]
