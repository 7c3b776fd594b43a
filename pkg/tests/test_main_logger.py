import logging
import os

from ridge_twfe.main_logger import LOGGER_NAME, ColorFormatter, configure_logging


def make_record(level, msg):
    return logging.LogRecord(
        name="ridge_twfe.test",
        level=level,
        pathname="",
        lineno=0,
        msg=msg,
        args=(),
        exc_info=None,
    )


def test_formatter_formats_correctly():
    formatter = ColorFormatter()

    info_formatted = formatter.format(make_record(logging.INFO, "info msg"))
    debug_formatted = formatter.format(make_record(logging.DEBUG, "debug msg"))
    warn_formatted = formatter.format(make_record(logging.WARNING, "warn msg"))
    error_formatted = formatter.format(make_record(logging.ERROR, "error msg"))

    assert "info msg" in info_formatted
    assert "INFO" not in info_formatted
    assert "\033[36mDEBUG" in debug_formatted
    assert "\033[33mWARNING" in warn_formatted
    assert "\033[31mERROR" in error_formatted
    assert "MainThread" in error_formatted


def test_configure_logging_console_only(tmp_path):
    log = configure_logging(output_dir=str(tmp_path))
    assert log.name == LOGGER_NAME
    assert log.level == logging.INFO
    assert len(log.handlers) == 1
    assert isinstance(log.handlers[0], logging.StreamHandler)
    assert not os.path.exists(tmp_path / "logs")


def test_configure_logging_creates_file_handler(tmp_path):
    log = configure_logging(log_to_file=True, output_dir=str(tmp_path), verbose=True)
    try:
        assert log.level == logging.DEBUG
        file_handlers = [h for h in log.handlers if isinstance(h, logging.FileHandler)]
        assert len(file_handlers) == 1
        log.debug("solver details")
        file_handlers[0].flush()
        files = os.listdir(tmp_path / "logs")
        assert len(files) == 1
        assert files[0].startswith("run_") and files[0].endswith(".log")
        with open(tmp_path / "logs" / files[0], encoding="utf-8") as f:
            assert "solver details" in f.read()
    finally:
        for handler in log.handlers:
            handler.close()
        log.handlers.clear()


def test_configure_logging_replaces_handlers(tmp_path):
    configure_logging(output_dir=str(tmp_path))
    log = configure_logging(output_dir=str(tmp_path))
    assert len(log.handlers) == 1


def test_child_loggers_propagate_to_package_logger(tmp_path, caplog):
    configure_logging(output_dir=str(tmp_path))
    with caplog.at_level(logging.INFO, logger=LOGGER_NAME):
        logging.getLogger("ridge_twfe.solvers").info("factor ready")
    assert "factor ready" in caplog.text
