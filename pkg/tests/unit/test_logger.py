"""Unit tests for logging setup."""

import logging

from utils.logger import ROOT_LOGGER_NAME, get_logger, setup_logger


class TestLogger:
    """Tests for setup_logger and get_logger."""

    def test_module_loggers_nest_under_package(self):
        """Module names are placed below the package logger."""
        assert get_logger("core.links").name == f"{ROOT_LOGGER_NAME}.core.links"
        assert get_logger(ROOT_LOGGER_NAME).name == ROOT_LOGGER_NAME

    def test_file_handler_writes(self, tmp_path):
        """Records reach the run log file."""
        log_file = tmp_path / "logs" / "run.log"
        logger = setup_logger("hypergraph_ssl_test", level="INFO", log_file=log_file)
        logger.info("phase done")
        for handler in logger.handlers:
            handler.flush()
        assert "phase done" in log_file.read_text(encoding="utf-8")

    def test_setup_replaces_handlers(self, tmp_path):
        """Repeated setup does not stack handlers."""
        setup_logger("hypergraph_ssl_test2", log_file=tmp_path / "a.log")
        logger = setup_logger("hypergraph_ssl_test2", level=logging.DEBUG)
        assert len(logger.handlers) == 1
        assert logger.level == logging.DEBUG
