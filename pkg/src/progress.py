import sys
import time
from typing import Optional, TextIO


class ProgressIndicator:
    """Single-line replication progress with elapsed time and an ETA.

    Redraws are throttled to ``min_interval`` seconds except for the final
    item, so a fast study does not flood the terminal.
    """

    BAR_WIDTH = 30

    def __init__(self, total: int, description: str = "Replications", stream: Optional[TextIO] = None,
                 min_interval: float = 0.1):
        self.total = max(int(total), 0)
        self.done = 0
        self.description = description
        self.stream = stream or sys.stdout
        self.min_interval = min_interval
        self.start_time = time.monotonic()
        self._last_draw = float("-inf")

    def report(self, done: int, total: int):
        """Callback for run_study: absolute number of finished replications"""
        self.total = total
        self.done = min(done, total)
        now = time.monotonic()
        if self.done < self.total and now - self._last_draw < self.min_interval:
            return
        self._last_draw = now
        self._draw(now)

    def eta(self, now: Optional[float] = None) -> Optional[float]:
        if self.done == 0 or self.total == 0:
            return None
        elapsed = (now or time.monotonic()) - self.start_time
        return elapsed / self.done * (self.total - self.done)

    def _draw(self, now: float):
        fraction = self.done / self.total if self.total else 1.0
        filled = int(round(self.BAR_WIDTH * fraction))
        bar = "=" * filled + "-" * (self.BAR_WIDTH - filled)
        remaining = self.eta(now)
        eta = "" if remaining is None else f", ETA {_clock(remaining)}"
        self.stream.write(f"\r{self.description}: [{bar}] {self.done}/{self.total} "
                          f"({_clock(now - self.start_time)}{eta})")
        self.stream.flush()

    def finish(self, message: str = "Complete"):
        elapsed = time.monotonic() - self.start_time
        self.stream.write(f"\r{message}: {self.done}/{self.total} in {_clock(elapsed)}\n")
        self.stream.flush()


def _clock(seconds: float) -> str:
    minutes, secs = divmod(int(round(seconds)), 60)
    hours, minutes = divmod(minutes, 60)
    return f"{hours:d}:{minutes:02d}:{secs:02d}" if hours else f"{minutes:d}:{secs:02d}"
