"""
Append-only JSON-lines persistence for probe outputs.

Every record is flushed as soon as it is written so a crashed run keeps
everything collected up to that point.
"""

import json
import os
import threading
from typing import Any, Callable, Dict, Iterable, Iterator, List, TypeVar

T = TypeVar("T")


class JsonLinesWriter:
    """Thread-safe appender for one JSON-lines file"""

    def __init__(self, path: str, truncate: bool = False):
        self.path = path
        self._lock = threading.Lock()
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        if truncate:
            open(path, "w", encoding="utf-8").close()

    def append(self, record: Dict[str, Any]):
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
                f.flush()

    def extend(self, records: Iterable[Dict[str, Any]]):
        for record in records:
            self.append(record)


def read_json_lines(path: str) -> Iterator[Dict[str, Any]]:
    """Yield records from a JSON-lines file; a truncated last line is skipped"""
    if not os.path.exists(path):
        return
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                continue


def load_records(path: str, factory: Callable[[Dict[str, Any]], T]) -> List[T]:
    return [factory(data) for data in read_json_lines(path)]
