import logging
import time

import pytest

from turbmend import parallel
from turbmend.logs import DIAGNOSTICS_LOGGER, configure_logging, log_iteration


@pytest.fixture
def restore_workers():
    yield
    parallel.set_max_workers(None)


def test_ordered_map_keeps_input_order(restore_workers):
    parallel.set_max_workers(4)

    def slow_square(x):
        time.sleep(0.001 * (5 - x))
        return x * x

    assert parallel.ordered_map(slow_square, range(5)) == [0, 1, 4, 9, 16]


def test_single_worker(restore_workers):
    parallel.set_max_workers(1)
    assert parallel.get_max_workers() == 1
    assert parallel.ordered_map(str, [1, 2]) == ["1", "2"]


def test_zero_means_all_cpus(restore_workers):
    parallel.set_max_workers(0)
    assert parallel.get_max_workers() >= 1


def test_diagnostics_are_csv(caplog, monkeypatch):
    monkeypatch.setattr(logging.getLogger("turbmend"), "propagate", True)
    with caplog.at_level(logging.DEBUG, logger=DIAGNOSTICS_LOGGER):
        log_iteration("rpca", 3, 1.5, 0.25)
    assert caplog.records[-1].getMessage() == "rpca,3,1.5,0.25"


def test_configure_logging_installs_one_handler():
    logger = configure_logging(logging.INFO)
    configure_logging(logging.DEBUG)
    assert len(logger.handlers) == 1
    assert logger.level == logging.DEBUG
    logger.propagate = True
