import sys
import time
from pathlib import Path

import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

from csrtd.checkpoint import save_checkpoint  # noqa: E402
from csrtd.config import DESK  # noqa: E402
from csrtd.data import SplitSpec, samples_in_memory  # noqa: E402
from csrtd.train import TrainConfig, train  # noqa: E402

DESK_SPEC = SplitSpec(500, 100, 100, seed=0)
DESK_EPOCHS = 30

# filled by the acceptance tests, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_data():
    return {s: samples_in_memory(DESK_SPEC, DESK.image_size, s) for s in ("train", "val", "test")}


class DeskRuns:
    """Trains desk-scale models on demand and keeps them for the whole session."""

    def __init__(self, data, root: Path):
        self.data, self.root, self._runs = data, root, {}

    def get(self, ablation: str = "iv", seed: int = 0):
        key = (ablation, seed)
        if key not in self._runs:
            cfg = TrainConfig(seed=seed, model=DESK.with_(ablation=ablation), max_epochs=DESK_EPOCHS)
            ckpt = self.root / f"{ablation}_{seed}.ckpt"
            start = time.time()
            with threadpool_limits(1):
                res = train(cfg, self.data["train"], self.data["val"], log_path=self.root / f"{ablation}_{seed}.log")
            save_checkpoint(res.best, ckpt)
            self._runs[key] = (res, ckpt, time.time() - start)
        return self._runs[key]


@pytest.fixture(scope="session")
def desk_runs(desk_data, tmp_path_factory):
    return DeskRuns(desk_data, tmp_path_factory.mktemp("desk_runs"))
