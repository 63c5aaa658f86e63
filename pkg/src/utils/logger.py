"""
Structured logging for the view selection toolkit.

Diagnostics go to standard error with colored level names; standard output
is left to subcommands that print data (pose grids, score and report tables).
"""

import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from colorama import Fore, Style

_LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_LEVEL_COLORS = {
    'DEBUG': Fore.CYAN,
    'INFO': Fore.GREEN,
    'WARNING': Fore.YELLOW,
    'ERROR': Fore.RED,
    'CRITICAL': Fore.MAGENTA,
}


class ColoredFormatter(logging.Formatter):
    """Formatter that colors the level name"""

    def format(self, record):
        color = _LEVEL_COLORS.get(record.levelname)
        if color is None:
            return super().format(record)
        # copy so other handlers (log files) keep the plain level name
        colored = logging.makeLogRecord(record.__dict__)
        colored.levelname = f"{color}{record.levelname}{Style.RESET_ALL}"
        return super().format(colored)


class StructuredLogger:
    """
    Logger that appends key=value context to every message.

    Persistent context (``add_context``) is merged with per-call keyword
    arguments and rendered as ``message [k=v | k=v]``.
    """

    def __init__(self, name: str, log_level: str = "INFO"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(_level(log_level))
        self.logger.handlers = []
        self.logger.propagate = False

        console = logging.StreamHandler(sys.stderr)
        console.setLevel(logging.DEBUG)
        console.setFormatter(ColoredFormatter(_LOG_FORMAT, datefmt=_DATE_FORMAT))
        self.logger.addHandler(console)

        self.context: Dict[str, Any] = {}

    def set_level(self, log_level: str):
        self.logger.setLevel(_level(log_level))

    def add_context(self, **kwargs):
        """Attach context to all subsequent messages"""
        self.context.update(kwargs)

    def clear_context(self):
        self.context = {}

    def _render(self, message: str, extra: Dict[str, Any]) -> str:
        fields = {**self.context, **extra}
        if not fields:
            return message
        return f"{message} [{' | '.join(f'{k}={v}' for k, v in fields.items())}]"

    def debug(self, message: str, **kwargs):
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(self._render(message, kwargs))

    def info(self, message: str, **kwargs):
        self.logger.info(self._render(message, kwargs))

    def warning(self, message: str, **kwargs):
        self.logger.warning(self._render(message, kwargs))

    def error(self, message: str, **kwargs):
        self.logger.error(self._render(message, kwargs))

    def critical(self, message: str, **kwargs):
        self.logger.critical(self._render(message, kwargs))

    def stage_start(self, stage: str, **params):
        """Log the start of a pipeline stage with its parameters as JSON"""
        self.info(f"Starting stage: {stage}", params=json.dumps(params, default=str, sort_keys=True))

    def stage_end(self, stage: str, duration_ms: float, success: bool = True):
        self.info(
            f"Completed stage: {stage}",
            status="SUCCESS" if success else "FAILED",
            duration_ms=round(duration_ms, 2),
        )

    def stage_error(self, stage: str, error: Exception):
        self.error(
            f"Error in stage: {stage}",
            error_type=type(error).__name__,
            error_message=str(error),
        )

    def coverage_audit(self, problems_done: int, counts: np.ndarray, min_coverage: int):
        """
        Log a view-count histogram for Monte-Carlo coverage tracking

        Args:
            problems_done: Number of clustering problems solved so far
            counts: Per-view count of problems containing the view
            min_coverage: Coverage floor the run must reach
        """
        if counts.size == 0:
            return
        lo, q1, median, q3, hi = np.percentile(counts, [0, 25, 50, 75, 100])
        self.info(
            "Coverage audit",
            problems=problems_done,
            views=int(counts.size),
            min=int(lo),
            q1=float(q1),
            median=float(median),
            q3=float(q3),
            max=int(hi),
            below_floor=int(np.count_nonzero(counts < min_coverage)),
        )

    def epoch_progress(self, epoch: int, epochs: int, loss: float, every: int):
        """Log the epoch loss every `every` epochs and at the last one"""
        if epoch % every == 0 or epoch == epochs:
            self.info("Epoch complete", epoch=f"{epoch}/{epochs}", loss=f"{loss:.6f}")


class StageMetrics:
    """
    Wall-clock durations, outcomes and counters of the stages of one
    subcommand. Stages are kept in start order.
    """

    def __init__(self):
        self.metrics: Dict[str, Dict[str, Any]] = {}
        self._clock: Dict[str, float] = {}

    def start_stage(self, stage: str):
        self._clock[stage] = time.perf_counter()
        self.metrics[stage] = {
            'started_at': datetime.now(),
            'duration_ms': None,
            'success': None,
            'error': None,
            'counters': {},
        }

    def end_stage(self, stage: str, success: bool, error: Optional[Exception] = None) -> float:
        """Close a stage and return its duration in milliseconds"""
        if stage not in self.metrics:
            return 0.0
        duration = (time.perf_counter() - self._clock.pop(stage)) * 1000
        self.metrics[stage].update(duration_ms=duration, success=success, error=str(error) if error else None)
        return duration

    def count(self, stage: str, **counters: int):
        """Add to named counters of a stage (problems solved, examples seen)"""
        bucket = self.metrics.setdefault(stage, {'started_at': None, 'duration_ms': None, 'success': None,
                                                 'error': None, 'counters': {}})['counters']
        for name, value in counters.items():
            bucket[name] = bucket.get(name, 0) + int(value)

    def summary_rows(self) -> List[List[Any]]:
        """[stage, duration_ms, status, counters] for every finished stage"""
        rows = []
        for stage, data in self.metrics.items():
            if data['duration_ms'] is None:
                continue
            counters = ", ".join(f"{k}={v}" for k, v in data['counters'].items())
            rows.append([stage, round(data['duration_ms'], 1), "ok" if data['success'] else "failed", counters])
        return rows

    def to_json(self) -> str:
        serializable = {
            stage: {
                **data,
                'started_at': data['started_at'].isoformat() if data['started_at'] else None,
            }
            for stage, data in self.metrics.items()
        }
        return json.dumps(serializable, indent=2)


def _level(name: str) -> int:
    return getattr(logging, name.upper())


_global_logger: Optional[StructuredLogger] = None


def get_logger(name: str = "viewselect", log_level: str = "INFO") -> StructuredLogger:
    """
    Get the shared "viewselect" logger; `name` only labels the call site
    """
    global _global_logger
    if _global_logger is None:
        _global_logger = StructuredLogger("viewselect", log_level)
    return _global_logger


def setup_file_logging(log_dir: Path, log_level: str = "INFO") -> Path:
    """
    Also write logs to a dated file in log_dir

    Returns:
        Path of the log file
    """
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / f"viewselect_{datetime.now().strftime('%Y%m%d')}.log"

    handler = logging.FileHandler(log_file, encoding="utf-8")
    handler.setLevel(_level(log_level))
    handler.setFormatter(logging.Formatter(_LOG_FORMAT, datefmt=_DATE_FORMAT))
    get_logger().logger.addHandler(handler)
    return log_file
