import pytest

from helpers import logger
from main import WinoqRunner


@pytest.fixture(autouse=True)
def _quiet_logger(monkeypatch):
    """Every test runs with the logger switched off"""
    logger.configure(format_strs=[], level=logger.DISABLED)
    monkeypatch.setattr(WinoqRunner, "DISABLE_LOGGER", True)
    yield
    logger.reset()
