"""
Blockprobe - Diagnostics & Session Logging

Session logging, per-operation statistics and error reporting for long
measurement runs.

Features:
- Timestamped session log (also echoed to the console)
- Per-operation progress and duration tracking
- Verdict counters per technique
- Error CSV for later triage
- JSON session summary
"""

import csv
import json
import os
import threading
import time
from datetime import datetime
from typing import Any, Callable, Dict, Optional


class ProbeLogger:
    """Thread-safe session logger for measurement runs"""

    def __init__(self, log_dir: Optional[str] = None, echo: bool = True):
        self.log_dir = log_dir or os.getcwd()
        self.session_id = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.start_time = time.time()
        self.echo = echo
        self._lock = threading.RLock()

        self.logs_path = os.path.join(self.log_dir, "probe_logs")
        os.makedirs(self.logs_path, exist_ok=True)

        self.main_log = os.path.join(self.logs_path, f"probe_{self.session_id}.log")
        self.stats_file = os.path.join(self.logs_path, f"stats_{self.session_id}.json")
        self.errors_file = os.path.join(self.logs_path, f"errors_{self.session_id}.csv")

        self.stats: Dict[str, Any] = {
            'session_id': self.session_id,
            'start_time': datetime.now().isoformat(),
            'probes_run': 0,
            'verdicts': {},
            'operations': {},
            'errors': [],
        }

        self.current_operation = ""
        self.progress_callback: Optional[Callable[[int, int, str], None]] = None

        self._write_log("=== Blockprobe Session Started ===")
        self._write_log(f"Session ID: {self.session_id}")
        self._write_log(f"Log Directory: {self.logs_path}")

    def set_progress_callback(self, callback: Callable[[int, int, str], None]):
        """Set callback function for progress updates"""
        self.progress_callback = callback

    def start_operation(self, operation_name: str, total_items: int = 0):
        """Start a new operation with progress tracking"""
        with self._lock:
            self.current_operation = operation_name
            self.stats['operations'][operation_name] = {
                'start_time': time.time(),
                'total_items': total_items,
                'completed_items': 0,
                'errors': 0,
                'status': 'running',
            }
        self._write_log(f"--- Starting: {operation_name} ---")
        if total_items > 0:
            self._write_log(f"Total items to process: {total_items}")

    def update_progress(self, completed: int, total: int, current_item: str = ""):
        """Update progress for the current operation"""
        with self._lock:
            op_stats = self.stats['operations'].get(self.current_operation)
            if op_stats is None:
                return
            op_stats['completed_items'] = completed

        if self.progress_callback:
            self.progress_callback(completed, total, current_item)

        if completed > 0 and completed % 50 == 0:
            self._write_log(f"Progress: {completed}/{total} - {current_item}")

    def complete_operation(self, success: bool = True):
        """Complete the current operation"""
        with self._lock:
            op_stats = self.stats['operations'].get(self.current_operation)
            if op_stats is None:
                return
            op_stats['end_time'] = time.time()
            op_stats['duration'] = op_stats['end_time'] - op_stats['start_time']
            op_stats['status'] = 'completed' if success else 'failed'
            name = self.current_operation
            self.current_operation = ""

        self._write_log(f"--- Completed: {name} ---")
        self._write_log(f"Duration: {op_stats['duration']:.2f} seconds")
        self._write_log(f"Items processed: {op_stats['completed_items']}")

    def log_config(self, key: str, value: Any):
        """Log configuration setting"""
        self._write_log(f"{key}: {value}")

    def log_info(self, message: str):
        """Log info message"""
        self._write_log(message)

    def log_warning(self, message: str):
        self._write_log(f"[WARN] {message}")

    def log_probe(self, technique: str, target: str, verdict: str, detail: str = ""):
        """Count a verdict and log it"""
        with self._lock:
            self.stats['probes_run'] += 1
            per_technique = self.stats['verdicts'].setdefault(technique, {})
            per_technique[verdict] = per_technique.get(verdict, 0) + 1
        suffix = f" ({detail})" if detail else ""
        self._write_log(f"[{technique.upper()}] {target}: {verdict}{suffix}", console=False)

    def log_error(self, error_message: str, target: str = "", error_type: str = "General"):
        """Log errors with categorization"""
        error_record = {
            'timestamp': datetime.now().isoformat(),
            'error_type': error_type,
            'message': error_message,
            'target': target,
            'operation': self.current_operation,
        }

        with self._lock:
            self.stats['errors'].append(error_record)
            op_stats = self.stats['operations'].get(self.current_operation)
            if op_stats is not None:
                op_stats['errors'] += 1

        self._write_log(f"[ERROR] {error_type}: {error_message}")
        if target:
            self._write_log(f"        Target: {target}")
        self._write_error_csv(error_record)

    def get_summary(self) -> Dict[str, Any]:
        """Get session summary"""
        total_duration = time.time() - self.start_time
        with self._lock:
            snapshot = json.loads(json.dumps(self.stats))
        return {
            **snapshot,
            'end_time': datetime.now().isoformat(),
            'total_duration_seconds': total_duration,
            'total_duration_formatted': self._format_duration(total_duration),
            'error_count': len(snapshot['errors']),
        }

    def save_session(self) -> Dict[str, Any]:
        """Save session statistics to JSON file"""
        summary = self.get_summary()

        with open(self.stats_file, 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2)

        self._write_log("=== Session Summary ===")
        self._write_log(f"Probes run: {summary['probes_run']}")
        for technique, counts in sorted(summary['verdicts'].items()):
            rendered = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
            self._write_log(f"  {technique}: {rendered}")
        self._write_log(f"Errors: {summary['error_count']}")
        self._write_log(f"Total duration: {summary['total_duration_formatted']}")
        self._write_log(f"Statistics saved: {self.stats_file}")

        return summary

    def _write_log(self, message: str, console: bool = True):
        """Write message to log file"""
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        log_line = f"[{timestamp}] {message}\n"

        with self._lock:
            with open(self.main_log, 'a', encoding='utf-8') as f:
                f.write(log_line)

        if self.echo and console:
            print(message)

    def _write_error_csv(self, error_record: Dict[str, str]):
        """Write error to CSV file"""
        with self._lock:
            file_exists = os.path.exists(self.errors_file)
            with open(self.errors_file, 'a', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                if not file_exists:
                    writer.writerow(['Timestamp', 'Type', 'Message', 'Target', 'Operation'])
                writer.writerow([
                    error_record['timestamp'],
                    error_record['error_type'],
                    error_record['message'],
                    error_record['target'],
                    error_record['operation'],
                ])

    @staticmethod
    def _format_duration(seconds: float) -> str:
        """Format duration in human-readable format"""
        if seconds < 60:
            return f"{seconds:.1f} seconds"
        elif seconds < 3600:
            return f"{seconds / 60:.1f} minutes"
        return f"{seconds / 3600:.1f} hours"
