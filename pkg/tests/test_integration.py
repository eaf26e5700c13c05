from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

import main as app

pytestmark = pytest.mark.integration

INTEGRATION_CONFIG = os.environ.get("DECOR_INTEGRATION_CONFIG", "")


@pytest.mark.skipif(
    not (os.environ.get("DECOR_API_KEY") and INTEGRATION_CONFIG),
    reason="set DECOR_API_KEY and DECOR_INTEGRATION_CONFIG to run against real endpoints",
)
def test_decor_beats_plain_dense_retrieval(tmp_path: Path) -> None:
    def cli(*args: str) -> int:
        return app.main(["--config", INTEGRATION_CONFIG, "--workdir", str(tmp_path), *args])

    assert cli("ingest") == 0
    assert cli("index") == 0
    assert cli("run", "--method", "plain") == 0
    assert cli("run", "--method", "decor") == 0
    work = app.Workdir(tmp_path)
    assert cli("eval", "--run", str(work.run_file("plain"))) == 0
    assert cli("eval", "--run", str(work.run_file("decor"))) == 0

    plain = json.loads(work.report_file("plain").read_text(encoding="utf-8"))["metrics"]
    decor = json.loads(work.report_file("decor").read_text(encoding="utf-8"))["metrics"]
    for name in ("hits@10", "hits@4", "map@10", "mrr@10"):
        assert decor[name] > plain[name], name
