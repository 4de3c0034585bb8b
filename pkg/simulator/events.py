"""
Protocol event log shared by the simulator endpoints.
"""

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

LAYERS = ("dns", "tcp", "http", "tls")


@dataclass(frozen=True)
class TranscriptEvent:
    timestamp: float
    layer: str
    event: str
    peer: str
    detail: Dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {
            "timestamp": self.timestamp,
            "layer": self.layer,
            "event": self.event,
            "peer": self.peer,
            "detail": self.detail,
        }


class Transcript:
    """Append-only, thread-safe ordered event log"""

    def __init__(self):
        self._events: List[TranscriptEvent] = []
        self._lock = threading.Lock()

    def append(self, layer: str, event: str, peer: str = "", **detail) -> TranscriptEvent:
        if layer not in LAYERS:
            raise ValueError(f"unknown layer '{layer}'")
        with self._lock:
            record = TranscriptEvent(time.time(), layer, event, peer, detail)
            self._events.append(record)
        return record

    @property
    def events(self) -> List[TranscriptEvent]:
        with self._lock:
            return list(self._events)

    def filter(self, layer: Optional[str] = None, event: Optional[str] = None,
               **detail) -> List[TranscriptEvent]:
        return [e for e in self.events
                if (layer is None or e.layer == layer)
                and (event is None or e.event == event)
                and all(e.detail.get(k) == v for k, v in detail.items())]

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)
