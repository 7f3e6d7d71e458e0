import csv
import os
import threading
from typing import Any, Dict, Iterable, List, Optional, Sequence

TRAIN_TRACE_COLUMNS = ('iter', 'loss', 'lr', 'psnr', 'holdout_loss', 'wall_ms')
SWEEP_COLUMNS = ('views', 'method', 'psnr', 'ssim', 'wall_ms', 'status', 'error')


class TraceStore:
    """Append-only CSV file shared by concurrent writers (training traces, sweep rows)."""

    def __init__(self, path: str, columns: Sequence[str]):
        self.path = path
        self.columns = tuple(columns)
        self._lock = threading.Lock()
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    def append(self, row: Dict[str, Any]):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown trace columns: {sorted(unknown)}")
        with self._lock:
            new_file = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
            with open(self.path, 'a', encoding='utf-8', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=self.columns)
                if new_file:
                    writer.writeheader()
                writer.writerow({c: _cell(row.get(c)) for c in self.columns})

    def extend(self, rows: Iterable[Dict[str, Any]]):
        for row in rows:
            self.append(row)

    def _read_all(self) -> List[Dict[str, str]]:
        if not os.path.exists(self.path):
            return []
        with self._lock:
            with open(self.path, 'r', encoding='utf-8', newline='') as f:
                return list(csv.DictReader(f))

    def rows(self) -> List[Dict[str, str]]:
        return self._read_all()


def _cell(value: Optional[Any]) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)
