import logging

import pytest
import yaml


@pytest.fixture(autouse=True)
def reset_mfclab_logging():
    """CLI runs attach a rich handler and stop propagation; undo that so caplog sees engine warnings."""
    yield
    logger = logging.getLogger("mfclab")
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture
def write_config(tmp_path):
    """Writes an experiment YAML under tmp_path and returns its path."""

    def write(data: dict, name: str = "experiment.yaml") -> str:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data))
        return str(path)

    return write
