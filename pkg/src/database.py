#!/usr/bin/env python3
"""
Sweep ledger

SQLite bookkeeping for sweeps: one row per cell (parameter value × seed ×
task × method) so an interrupted sweep can resume without repeating finished
cells.
"""

import json
import sqlite3
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Union

from .errors import PersistenceError, SweepConflictError

STATUSES = ('pending', 'running', 'completed', 'failed')


def cell_id(param_value: Any, seed: int, task: str, method: str) -> str:
    """Stable identifier of one sweep cell"""
    return f"value={json.dumps(param_value)}|seed={seed}|task={task}|method={method}"


class SweepLedger:
    """SQLite ledger of sweep cells, bound to one sweep hash"""

    def __init__(self, db_path: Union[str, Path], sweep_hash: str, force: bool = False):
        """
        Open (or create) the ledger

        Args:
            db_path: Path to SQLite database file
            sweep_hash: Config hash of the sweep this ledger belongs to
            force: take over a ledger written by a different sweep, discarding its cells
        """
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.sweep_hash = sweep_hash
        self._lock = threading.Lock()
        try:
            self.conn = sqlite3.connect(str(self.db_path), check_same_thread=False)
        except sqlite3.Error as exc:
            raise PersistenceError(f"cannot open sweep ledger {self.db_path}: {exc}") from exc
        self.conn.row_factory = sqlite3.Row
        self._create_tables()
        self._claim(force)

    def _create_tables(self):
        cursor = self.conn.cursor()
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS ledger_meta (
                key TEXT PRIMARY KEY,
                value TEXT NOT NULL
            )
        """)
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cells (
                cell_id TEXT PRIMARY KEY,
                sweep_hash TEXT NOT NULL,
                seed INTEGER NOT NULL,
                task TEXT NOT NULL,
                method TEXT NOT NULL,
                param_value TEXT,  -- JSON
                status TEXT NOT NULL DEFAULT 'pending',
                started_at TIMESTAMP,
                finished_at TIMESTAMP,
                error TEXT,
                metrics TEXT  -- JSON list of metrics rows
            )
        """)
        cursor.execute("CREATE INDEX IF NOT EXISTS idx_cells_status ON cells(status)")
        self.conn.commit()

    def _claim(self, force: bool):
        """Bind the ledger to this sweep hash"""
        cursor = self.conn.cursor()
        cursor.execute("SELECT value FROM ledger_meta WHERE key = 'sweep_hash'")
        row = cursor.fetchone()
        if row is not None and row['value'] != self.sweep_hash:
            if not force:
                raise SweepConflictError(
                    f"{self.db_path} belongs to sweep {row['value'][:8]}, not {self.sweep_hash[:8]}; "
                    "use --force to start over")
            print(f"  ⚠️  Discarding ledger of sweep {row['value'][:8]}")
            cursor.execute("DELETE FROM cells")
        cursor.execute("""
            INSERT INTO ledger_meta (key, value) VALUES ('sweep_hash', ?)
            ON CONFLICT(key) DO UPDATE SET value = excluded.value
        """, (self.sweep_hash,))
        self.conn.commit()

    def upsert_cell(self, cell: str, seed: int, task: str, method: str, param_value: Any = None,
                    status: str = 'pending', metrics: Optional[List[Dict[str, Any]]] = None,
                    error: Optional[str] = None):
        """
        Insert or update a cell record

        Args:
            cell: identifier from cell_id()
            status: one of STATUSES; 'running' stamps started_at, 'completed'/'failed' stamp finished_at
            metrics: rows produced by the cell (stored as JSON)
        """
        if status not in STATUSES:
            raise ValueError(f"unknown cell status '{status}'")
        now = datetime.now().isoformat()
        started = now if status == 'running' else None
        finished = now if status in ('completed', 'failed') else None
        with self._lock:
            self.conn.execute("""
                INSERT INTO cells (cell_id, sweep_hash, seed, task, method, param_value, status,
                                   started_at, finished_at, error, metrics)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                ON CONFLICT(cell_id) DO UPDATE SET
                    status = excluded.status,
                    started_at = COALESCE(excluded.started_at, started_at),
                    finished_at = excluded.finished_at,
                    error = excluded.error,
                    metrics = COALESCE(excluded.metrics, metrics)
            """, (cell, self.sweep_hash, seed, task, method, json.dumps(param_value), status,
                  started, finished, error, json.dumps(metrics) if metrics is not None else None))
            self.conn.commit()

    def get_cell(self, cell: str) -> Optional[Dict[str, Any]]:
        with self._lock:
            row = self.conn.execute("SELECT * FROM cells WHERE cell_id = ?", (cell,)).fetchone()
        if row is None:
            return None
        record = dict(row)
        record['param_value'] = json.loads(record['param_value']) if record['param_value'] else None
        record['metrics'] = json.loads(record['metrics']) if record['metrics'] else []
        return record

    def is_completed(self, cell: str) -> bool:
        record = self.get_cell(cell)
        return record is not None and record['status'] == 'completed'

    def completed_cells(self) -> Set[str]:
        with self._lock:
            rows = self.conn.execute("SELECT cell_id FROM cells WHERE status = 'completed'").fetchall()
        return {row['cell_id'] for row in rows}

    def get_statistics(self) -> Dict[str, Any]:
        """Cell counts per status"""
        with self._lock:
            rows = self.conn.execute("SELECT status, COUNT(*) AS count FROM cells GROUP BY status").fetchall()
        stats = {status: 0 for status in STATUSES}
        stats.update({row['status']: row['count'] for row in rows})
        stats['total_cells'] = sum(stats[s] for s in STATUSES)
        return stats

    def close(self):
        """Close database connection"""
        self.conn.close()
