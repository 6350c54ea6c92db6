"""CSV persistence for datasets (header ``y,w,x``, UTF-8, '.' decimals)."""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from psgel.domain.errors import IngestionError
from psgel.domain.models import Dataset

logger = logging.getLogger(__name__)

COLUMNS = ("y", "w", "x")


def load_csv(path: Union[str, Path]) -> Dataset:
    """
    Parse a dataset file.

    Rows are numbered from 1 after the header, which is how errors cite them.

    Raises:
        IngestionError: missing file or columns, unparseable or non-finite entries
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, encoding="utf-8", skipinitialspace=True)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError(f"cannot parse {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise IngestionError(f"{path} is empty") from e

    frame.columns = [str(c).strip().lower() for c in frame.columns]
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise IngestionError(f"missing columns {missing} in {path}")
    if frame.empty:
        raise IngestionError(f"{path} has no data rows")

    columns = {}
    for name in COLUMNS:
        raw = frame[name]
        parsed = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
        for offset in np.flatnonzero(~np.isfinite(parsed)):
            value = raw.iloc[offset]
            row = int(offset) + 1
            if pd.isna(value) or str(value).strip().lower() in {"nan", "inf", "-inf", "+inf"}:
                raise IngestionError(f"non-finite {name} value {value!r}", row=row)
            raise IngestionError(f"cannot parse {name} value {value!r}", row=row)
        columns[name] = parsed

    logger.info("Loaded %d observations from %s", len(frame), path)
    return Dataset(y=columns["y"], w=columns["w"], x=columns["x"])


def write_csv(data: Dataset, path: Union[str, Path]) -> Path:
    """Write a dataset with full double precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"y": data.y, "w": data.w, "x": data.x})
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    logger.info("Wrote %d observations to %s", data.n, path)
    return path
