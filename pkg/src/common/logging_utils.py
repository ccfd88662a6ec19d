"""Logging setup with key=value rendering of structured context"""

import logging
from typing import Optional

_STANDARD_ATTRS = set(
    logging.LogRecord("", logging.INFO, "", 0, "", None, None).__dict__
) | {"message", "asctime"}


class KeyValueFormatter(logging.Formatter):
    """Appends the ``extra`` fields of a record as sorted key=value pairs"""

    def format(self, record: logging.LogRecord) -> str:
        base = super().format(record)
        extras = {
            key: value
            for key, value in record.__dict__.items()
            if key not in _STANDARD_ATTRS and not key.startswith("_")
        }
        if not extras:
            return base
        rendered = " ".join(f"{key}={extras[key]}" for key in sorted(extras))
        return f"{base} | {rendered}"


def setup_logging(level: str = "INFO", stream: Optional[object] = None) -> None:
    handler = logging.StreamHandler(stream)
    handler.setFormatter(
        KeyValueFormatter("%(asctime)s %(levelname)s %(name)s - %(message)s")
    )
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level.upper())
    # joblib is chatty at DEBUG
    logging.getLogger("joblib").setLevel(logging.WARNING)
