import csv
import json
import os
import pathlib
import sys
import time

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from adfp.cli import EXIT_OK, main  # noqa: E402
from adfp.config import RunConfig  # noqa: E402

CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"

# criterion number -> (passed, title, detail); filled by test_acceptance
CRITERIA: dict = {}


class SmokeRun:
    def __init__(self, root: pathlib.Path, wall_seconds: float | None):
        self.root = root
        self.wall_seconds = wall_seconds
        self.config = RunConfig.from_json((root / "config.json").read_text())

    def report(self, name):
        return json.loads((self.root / "reports" / name).read_text())

    def csv_rows(self, name):
        with open(self.root / "reports" / name, newline="") as fh:
            return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Full pipeline on configs/smoke.toml, once per session.

    ADFP_SMOKE_DIR points at a run directory to reuse across sessions; it is resumed (cheap when
    complete) and must have been created from the current smoke config.
    """
    preset = os.environ.get("ADFP_SMOKE_DIR")
    root = pathlib.Path(preset) if preset else tmp_path_factory.mktemp("smoke") / "run"
    timing = root / "wall_seconds.json"
    wanted = RunConfig.from_toml(CONFIGS / "smoke.toml")
    if (root / "config.json").exists():
        saved = RunConfig.from_json((root / "config.json").read_text())
        if saved.to_json() != wanted.to_json():
            pytest.fail(f"{root} was created from a different smoke config; delete it or unset ADFP_SMOKE_DIR")
        args = ["pipeline", "--resume", "--out", str(root)]
    else:
        args = ["pipeline", "--config", str(CONFIGS / "smoke.toml"), "--out", str(root)]
    start = time.monotonic()
    code = main(args)
    elapsed = time.monotonic() - start
    if code != EXIT_OK:
        pytest.fail(f"smoke pipeline exited with {code}; see {root / 'run.log'}")
    if "--resume" not in args:
        timing.write_text(json.dumps({"wall_seconds": elapsed, "cpus": os.cpu_count()}) + "\n")
    # a run created outside the test session has no recorded wall time
    wall = json.loads(timing.read_text())["wall_seconds"] if timing.exists() else None
    return SmokeRun(root, wall)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, title, detail = CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")
