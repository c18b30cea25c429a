import json
import time

import pytest

from erpscan import cli

# criterion number -> list of (check name, passed, detail)
ACCEPTANCE = {}


def record(criterion: int, name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((name, bool(passed), detail))
    print(f"criterion {criterion} [{name}]: {'PASS' if passed else 'FAIL'} {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[k]
        ok = all(p for _, p, _ in checks)
        parts = "; ".join(f"{n}={'ok' if p else 'FAIL'} {d}".strip() for n, p, d in checks)
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {parts}")


def pytest_collection_modifyitems(items):
    for item in items:
        if "desk_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The desk-scale pipeline with default configuration, run once per session."""
    root = tmp_path_factory.mktemp("desk") / "run"
    t = time.perf_counter()
    assert cli.main(["all", "--out", str(root)]) == 0
    wall = time.perf_counter() - t
    manifest = json.loads((root / "manifest_all.json").read_text())
    return dict(root=root, wall=wall, manifest=manifest)
