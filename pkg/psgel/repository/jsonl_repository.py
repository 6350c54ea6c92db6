"""Append-only JSON-lines store for Monte Carlo run records."""

import json
import logging
import math
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from psgel.domain.models import RunRecord

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"


def json_safe(value: Any) -> Any:
    """Non-finite floats become null; JSON has no spelling for them."""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


class JsonlRepository:
    """One RunRecord per line; records are never rewritten."""

    def __init__(self, results_dir: Path, filename: str = RECORDS_FILE):
        self.results_dir = Path(results_dir)
        self.path = self.results_dir / filename
        self.skipped = 0

    def init_store(self) -> None:
        """Create the results directory."""
        self.results_dir.mkdir(parents=True, exist_ok=True)

    def append(self, record: RunRecord) -> None:
        """Write one record and flush it."""
        self.init_store()
        line = json.dumps(json_safe(record.to_dict()), sort_keys=True, allow_nan=False)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
            f.flush()

    def _iter_lines(self) -> Iterator[tuple[int, str]]:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                line = line.strip()
                if line:
                    yield number, line

    def load(self, config_hash: Optional[str] = None) -> list[RunRecord]:
        """
        Parse every readable record, keeping the first per replication index.

        Corrupt lines, and records written under a different config hash when one
        is given, are skipped and counted in ``skipped``.
        """
        self.skipped = 0
        records: dict[int, RunRecord] = {}
        for number, line in self._iter_lines():
            try:
                record = RunRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                logger.warning("%s:%d: skipping corrupt record (%s)", self.path, number, e)
                self.skipped += 1
                continue
            if config_hash is not None and record.config_hash != config_hash:
                logger.warning("%s:%d: record belongs to another configuration", self.path, number)
                self.skipped += 1
                continue
            records.setdefault(record.index, record)
        return [records[i] for i in sorted(records)]

    def completed_indices(self, config_hash: Optional[str] = None) -> set[int]:
        """Replication indices already on disk."""
        return {record.index for record in self.load(config_hash)}
