import json
import logging

import pytest

from saeipw.errors import ConfigError
from saeipw.logger import JsonFormatter, setup_logger
from saeipw.settings import get_settings, load_config_file


def test_settings_read_the_environment(monkeypatch):
    monkeypatch.setenv("SAEIPW_LOG_LEVEL", "debug")
    monkeypatch.setenv("SAEIPW_WORKERS", "3")
    monkeypatch.setenv("SAEIPW_CLIP", "0.01")
    settings = get_settings()
    assert settings.log_level == "DEBUG"
    assert settings.workers == 3
    assert settings.clip == 0.01


def test_invalid_environment_is_a_config_error(monkeypatch):
    monkeypatch.setenv("SAEIPW_CLIP", "0.9")
    with pytest.raises(ConfigError):
        get_settings()


def test_config_file_keys_are_normalised(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("BOOT-REPS=50\nseed=7\n# comment\nmethods=eblup,mq\n")
    assert load_config_file(path) == {
        "boot_reps": "50",
        "seed": "7",
        "methods": "eblup,mq",
    }


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "absent.cfg")


def test_json_formatter_copies_extra_fields():
    record = logging.LogRecord(
        "saeipw.model.lmm", logging.WARNING, __file__, 10, "at boundary", None, None
    )
    record.component = "sigma2_u"
    payload = json.loads(JsonFormatter().format(record))
    assert payload["level"] == "WARNING"
    assert payload["message"] == "at boundary"
    assert payload["component"] == "sigma2_u"


def test_setup_logger_does_not_stack_handlers(tmp_path):
    first = setup_logger("INFO", str(tmp_path))
    count = len(first.handlers)
    second = setup_logger("WARNING", str(tmp_path))
    assert len(second.handlers) == count
    assert second.level == logging.WARNING
    assert (tmp_path / "saeipw.log").exists()
