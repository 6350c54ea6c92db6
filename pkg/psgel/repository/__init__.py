"""Repository layer for data persistence."""

from psgel.repository.dataset_csv import load_csv, write_csv
from psgel.repository.jsonl_repository import JsonlRepository

__all__ = ["JsonlRepository", "load_csv", "write_csv"]
