"""Machine-readable diagnostics stream (one JSON object per line)."""

import json
import time


class EventLog:
    def __init__(self, stream=None):
        self.stream = stream
        self.start = time.monotonic()
        self.counts = {}

    def emit(self, event: str, **fields):
        self.counts[event] = self.counts.get(event, 0) + 1
        if self.stream is None:
            return
        record = {"event": event, "t": round(time.monotonic() - self.start, 6), **fields}
        self.stream.write(json.dumps(record, default=_plain) + "\n")
        self.stream.flush()


def _plain(value):
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    return str(value)
