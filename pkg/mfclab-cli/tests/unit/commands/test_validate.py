import json
from dataclasses import replace
from unittest.mock import MagicMock

import pytest
from mfclab.commands.validate import execute, run_checks
from mfclab.engine import model as model_module
from mfclab.engine.model import ProbePlan, builtin_model


@pytest.fixture
def args(write_config, tmp_path):
    """Quick validation of the OU model writing to tmp_path/out."""
    args = MagicMock()
    args.check = "all"
    args.quick = True
    args.config = write_config({"model": {"name": "ou_chaos"}})
    args.seed = None
    args.out = str(tmp_path / "out")
    args.verbose = False
    return args


def test_run_checks_selects_validators():
    reports = run_checks(builtin_model("ou_chaos"), "lipschitz", ProbePlan.quick())
    assert [r.kind for r in reports] == ["lipschitz"]
    assert len(run_checks(builtin_model("ou_chaos"), "all", ProbePlan.quick())) == 2


def test_validate_writes_table_and_manifest(args, tmp_path):
    execute(args)

    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["command"] == "validate"
    assert [r["kind"] for r in manifest["results"]["reports"]] == ["growth", "lipschitz"]
    table = (tmp_path / "out" / "validation.csv").read_text().splitlines()
    assert table[0].startswith("kind,name")
    assert any(line.startswith("lipschitz,drift_lipschitz") for line in table)


def test_validate_exits_when_a_check_fails(args, write_config, monkeypatch):
    def quadratic(params):
        return replace(builtin_model("ou_chaos"), name="quadratic", drift=lambda t, x, m, a: x**2)

    monkeypatch.setattr(model_module, "_USER_MODELS", {"quadratic": quadratic})
    args.check = "growth"
    args.config = write_config({"model": {"name": "quadratic"}})

    with pytest.raises(SystemExit) as excinfo:
        execute(args)
    assert excinfo.value.code == 1


def test_validate_exits_on_unknown_model(args, write_config):
    args.config = write_config({"model": {"name": "nope"}})
    with pytest.raises(SystemExit):
        execute(args)
