#!/usr/bin/env python3
"""
Tests für das Unified Logging System und die config.json-Überschreibungen.
"""

import json
import os
import sys
import tempfile
import uuid

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(__file__))

from unlearnlab import config
from unlearnlab.unified_logger import (
    UnifiedLogger,
    log_data,
    log_error,
    log_eval,
    log_system,
    log_unlearn,
    unified_logger,
)


def _unique(text):
    return f"{text} {uuid.uuid4().hex[:8]}"


def _latest(message_part):
    for entry in unified_logger.get_logs(limit=50):
        if message_part in entry["message"]:
            return entry
    return None


def test_logger_is_singleton():
    assert UnifiedLogger() is unified_logger
    assert UnifiedLogger() is UnifiedLogger()


def test_category_prefixes_and_context():
    msg = _unique("partition ready")
    log_data(msg, seed=3)
    entry = _latest(msg)
    assert entry["message"] == f"[DATA] {msg}"
    assert entry["level"] == "INFO"
    assert entry["context"] == {"seed": 3}

    msg = _unique("forget phase done")
    log_unlearn(msg, method="muda", seed=1, extra_context={"step": 7})
    entry = _latest(msg)
    assert entry["message"].startswith("[UNLEARN] ")
    assert entry["context"] == {"step": 7, "method": "muda", "seed": 1}

    msg = _unique("scored")
    log_eval(msg, method="ft")
    assert _latest(msg)["context"] == {"method": "ft"}

    msg = _unique("run finished")
    log_system(msg)
    assert _latest(msg)["message"] == f"[SYSTEM] {msg}"


def test_deduplication():
    msg = _unique("same error twice")

    def count():
        return sum(e["message"] == msg for e in unified_logger.json_logs)

    log_error(msg)
    log_error(msg)
    assert count() == 1
    log_error(msg, dedupe=False)
    assert count() == 2


def test_error_traceback_recorded():
    msg = _unique("method failed")
    try:
        raise ValueError("boom")
    except ValueError:
        log_error(msg, exc_info=True)
    entry = _latest(msg)
    assert "ValueError: boom" in entry["traceback"]


def test_level_filter():
    msg = _unique("only errors")
    log_error(msg)
    assert all(e["level"] == "ERROR" for e in unified_logger.get_logs(limit=20, level="error"))


def test_events_file_is_replaced_atomically():
    msg = _unique("event persisted")
    log_system(msg)
    with open(unified_logger.json_log_file, encoding="utf-8") as f:
        stored = json.load(f)
    assert any(e["message"] == f"[SYSTEM] {msg}" for e in stored)
    leftovers = [n for n in os.listdir(os.path.dirname(unified_logger.json_log_file)) if n.startswith(".tmp_")]
    assert leftovers == []


def test_forked_worker_writes_its_own_events_file():
    saved = (config.EVENTS_FILE, unified_logger._pid, unified_logger.json_log_file, unified_logger.json_logs)
    try:
        with tempfile.TemporaryDirectory() as tmp:
            config.EVENTS_FILE = os.path.join(tmp, "events.json")
            unified_logger._pid = -1
            msg = _unique("worker event")
            log_eval(msg, method="muda", seed=2)
            expected = os.path.join(tmp, f"events_{os.getpid()}.json")
            assert unified_logger.json_log_file == expected
            with open(expected, encoding="utf-8") as f:
                stored = json.load(f)
            assert [e["message"] for e in stored] == [f"[EVAL] {msg}"]
            assert not os.path.exists(config.EVENTS_FILE)
    finally:
        (config.EVENTS_FILE, unified_logger._pid, unified_logger.json_log_file, unified_logger.json_logs) = saved


def test_load_config_overrides():
    saved = (config.CONFIG_FILE, config.LOG_LEVEL, config.LOG_TIMEZONE,
             config.MAX_LOG_ENTRIES, config.DEFAULT_OUTPUT_DIR)
    try:
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({"log_level": "DEBUG", "log_timezone": "Europe/Berlin",
                           "max_log_entries": "250", "output_dir": tmp}, f)
            config.CONFIG_FILE = path
            config.load_config()
            assert config.LOG_LEVEL == "DEBUG"
            assert config.LOG_TIMEZONE == "Europe/Berlin"
            assert config.MAX_LOG_ENTRIES == 250
            assert config.DEFAULT_OUTPUT_DIR == tmp

            with open(path, "w", encoding="utf-8") as f:
                f.write("{kaputt")
            config.LOG_LEVEL = "INFO"
            config.load_config()
            assert config.LOG_LEVEL == "INFO"
    finally:
        (config.CONFIG_FILE, config.LOG_LEVEL, config.LOG_TIMEZONE,
         config.MAX_LOG_ENTRIES, config.DEFAULT_OUTPUT_DIR) = saved


def test_unknown_timezone_falls_back_to_utc():
    import pytz
    assert UnifiedLogger._resolve_timezone("Mars/Olympus") is pytz.utc
    assert UnifiedLogger._resolve_timezone("UTC") is pytz.utc


def run_all():
    print("🧪 Testing logging and config")
    print("=" * 50)
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_") and callable(v)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"   ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"   ❌ {test.__name__}: {e}")
    print(f"\n{'🎉 All tests passed' if not failed else f'❌ {failed} test(s) failed'}")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if run_all() else 1)
