"""Summary tables, plot-ready CSVs and the markdown run report."""

import json
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from scipy import stats

from psgel.domain.enums import ExperimentMode
from psgel.domain.models import RunRecord
from psgel.repository.jsonl_repository import json_safe
from psgel.utils.config import ExperimentConfig

logger = logging.getLogger(__name__)

NOMINAL_SIZES = (0.01, 0.05, 0.10)
QQ_TRIM = 0.99

TABLE_COLUMNS: dict[str, dict[str, str]] = {
    "size_coverage": {
        "quantity": "qlr_rejection, inversion_coverage or self_normalized_coverage",
        "nominal": "nominal size (rejection) or confidence level (coverage)",
        "count": "successful replications",
        "hits": "rejections or covering sets",
        "rate": "hits / count",
        "mean_length": "mean total length of the confidence set",
        "empty": "replications with an empty confidence set",
    },
    "qq": {
        "rank": "1-based rank of the sorted QLR statistic",
        "statistic": "sorted QLR statistic",
        "chi2_quantile": "chi-square(1) quantile at (rank - 0.5) / count",
    },
    "estimates": {
        "count": "successful replications",
        "theta0": "true weighted average derivative",
        "mean_theta_hat": "mean estimate",
        "bias": "mean_theta_hat - theta0",
        "sd": "standard deviation of the estimates",
        "rmse": "root mean squared error",
        "mean_abs_error": "mean |theta_hat - theta0|",
    },
    "spectrum": {
        "index": "1-based singular value index",
        "singular_value": "singular value of the weighted operator",
        "picard_partial_sum": "correction term keeping the first index values",
    },
    "truncation": {
        "kept": "number of singular values kept",
        "v0": "efficiency bound at that truncation (empty when infinite)",
    },
    "riesz_path": {
        "k": "sieve order",
        "j": "instrument order",
        "vstar_norm_sq": "oracle squared Riesz-representer norm",
        "v0": "efficiency bound",
    },
    "curvature": {
        "t": "distance from the pseudo-true point",
        "varpi": "exterior infimum of the penalized population criterion",
        "boundary_minimum": "minimum on the shell at distance t",
    },
    "curvature_orders": {
        "k": "sieve order",
        "j": "instrument order",
        "i_l_min_eig": "smallest eigenvalue of the local information matrix",
    },
    "alr": {
        "index": "replication index",
        "lhs": "(theta_hat - theta_L0) / ||v*||_w",
        "rhs": "influence-function average",
        "scaled_gap": "sqrt(n) (lhs - rhs)",
        "standardized": "sqrt(n) (theta_hat - theta0) / ||v*||_w",
    },
}


def _frame(name: str, rows: list[dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=list(TABLE_COLUMNS[name]))


def _write_table(results_dir: Path, name: str, frame: pd.DataFrame, skipped: int) -> Path:
    """CSV with a header row and a ``# skipped_records`` footer."""
    path = results_dir / f"{name}.csv"
    frame.to_csv(path, index=False, float_format="%.10g", encoding="utf-8")
    with open(path, "a", encoding="utf-8") as f:
        f.write(f"# skipped_records={skipped}\n")
    return path


def _payloads(records: list[RunRecord]) -> list[dict[str, Any]]:
    return [record.payload for record in records if record.ok]


def qq_rows(statistics: list[float]) -> list[dict[str, Any]]:
    ordered = np.sort(np.asarray(statistics, dtype=float))
    m = ordered.size
    quantiles = stats.chi2.ppf((np.arange(1, m + 1) - 0.5) / m, 1) if m else np.zeros(0)
    return [
        {"rank": i + 1, "statistic": float(s), "chi2_quantile": float(q)}
        for i, (s, q) in enumerate(zip(ordered, quantiles))
    ]


def qq_correlation(rows: list[dict[str, Any]], trim: float = QQ_TRIM) -> Optional[float]:
    """Correlation of sorted statistics and chi-square quantiles below the ``trim`` quantile."""
    cutoff = stats.chi2.ppf(trim, 1)
    kept = [(r["statistic"], r["chi2_quantile"]) for r in rows if r["chi2_quantile"] <= cutoff]
    if len(kept) < 3:
        return None
    sample, theory = np.asarray(kept).T
    if np.std(sample) == 0.0:
        return None
    return float(np.corrcoef(sample, theory)[0, 1])


def normal_qq_correlation(draws: list[float]) -> Optional[float]:
    """Correlation of sorted draws with standard normal plotting-position quantiles."""
    ordered = np.sort(np.asarray(draws, dtype=float))
    m = ordered.size
    if m < 3 or np.std(ordered) == 0.0:
        return None
    return float(np.corrcoef(ordered, stats.norm.ppf((np.arange(1, m + 1) - 0.5) / m))[0, 1])


def rejection_rows(statistics: list[float]) -> list[dict[str, Any]]:
    count = len(statistics)
    rows = []
    for size in NOMINAL_SIZES:
        critical = stats.chi2.ppf(1.0 - size, 1)
        hits = int(sum(s > critical for s in statistics))
        rows.append(
            {
                "quantity": "qlr_rejection",
                "nominal": size,
                "count": count,
                "hits": hits,
                "rate": hits / count if count else None,
                "mean_length": None,
                "empty": None,
            }
        )
    return rows


def coverage_rows(payloads: list[dict[str, Any]]) -> list[dict[str, Any]]:
    rows = []
    for quantity, key in (("inversion_coverage", "inversion"), ("self_normalized_coverage", "selfNormalized")):
        levels = sorted({level for p in payloads for level in (p.get(key) or {})}, key=float)
        for level in levels:
            cells = [p[key][level] for p in payloads if (p.get(key) or {}).get(level)]
            count = len(cells)
            hits = sum(bool(c["covered"]) for c in cells)
            lengths = [c["length"] for c in cells if c.get("length") is not None]
            rows.append(
                {
                    "quantity": quantity,
                    "nominal": float(level),
                    "count": count,
                    "hits": hits,
                    "rate": hits / count if count else None,
                    "mean_length": float(np.mean(lengths)) if lengths else None,
                    "empty": sum(bool(c.get("empty", False)) for c in cells),
                }
            )
    return rows


def estimate_rows(payloads: list[dict[str, Any]]) -> list[dict[str, Any]]:
    pairs = [(p["thetaHat"], p["theta0"]) for p in payloads if p.get("thetaHat") is not None and "theta0" in p]
    if not pairs:
        return []
    estimates, truths = np.asarray(pairs).T
    errors = estimates - truths
    return [
        {
            "count": len(pairs),
            "theta0": float(truths[0]),
            "mean_theta_hat": float(np.mean(estimates)),
            "bias": float(np.mean(errors)),
            "sd": float(np.std(estimates, ddof=1)) if len(pairs) > 1 else 0.0,
            "rmse": float(math.sqrt(np.mean(errors**2))),
            "mean_abs_error": float(np.mean(np.abs(errors))),
        }
    ]


def _bound_tables(payload: dict[str, Any]) -> dict[str, list[dict[str, Any]]]:
    bound = payload["bound"]
    spectrum = bound.get("svdSpectrum", [])
    partial = bound.get("picardPartialSums", [])
    return {
        "spectrum": [
            {
                "index": i + 1,
                "singular_value": s,
                "picard_partial_sum": partial[i] if i < len(partial) else None,
            }
            for i, s in enumerate(spectrum)
        ],
        "truncation": [{"kept": row["kept"], "v0": row["v0"]} for row in payload.get("sweep", [])],
        "riesz_path": [
            {"k": row["k"], "j": row["j"], "vstar_norm_sq": row["vstarNormSq"], "v0": row["v0"]}
            for row in payload.get("rieszPath", [])
        ],
    }


def _curvature_tables(payload: dict[str, Any]) -> dict[str, list[dict[str, Any]]]:
    minima = payload.get("boundaryMinima", [])
    return {
        "curvature": [
            {"t": t, "varpi": v, "boundary_minimum": minima[i] if i < len(minima) else None}
            for i, (t, v) in enumerate(payload.get("varpiSamples", []))
        ],
        "curvature_orders": [
            {"k": row["k"], "j": row["j"], "i_l_min_eig": row["iLMinEig"]} for row in payload.get("byOrder", [])
        ],
    }


def _alr_rows(records: list[RunRecord]) -> list[dict[str, Any]]:
    return [
        {
            "index": record.index,
            "lhs": record.payload["lhs"],
            "rhs": record.payload["rhs"],
            "scaled_gap": record.payload["scaledGap"],
            "standardized": record.payload["standardized"],
        }
        for record in records
        if record.ok and "standardized" in record.payload
    ]


def _infer_mode(payloads: list[dict[str, Any]]) -> Optional[ExperimentMode]:
    for payload in payloads:
        if "bound" in payload:
            return ExperimentMode.BOUND
        if "varpiSamples" in payload:
            return ExperimentMode.CURVATURE
        if "standardized" in payload:
            return ExperimentMode.ALR
        if "inversion" in payload:
            return ExperimentMode.CI_COVERAGE
        if "statistic" in payload:
            return ExperimentMode.QLR_SIZE
        return ExperimentMode.ESTIMATE
    return None


def _cell(value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _markdown_table(frame: pd.DataFrame) -> list[str]:
    if frame.empty:
        return ["_No rows_"]
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    lines = [header, rule]
    for row in frame.itertuples(index=False):
        cells = [_cell(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def render_markdown(summary: dict[str, Any], tables: dict[str, pd.DataFrame]) -> str:
    """
    Markdown run report.

    Args:
        summary: Output of ``summarize``
        tables: Frames written next to the report

    Returns:
        Report text
    """
    lines = ["# Run report", ""]
    lines.append(f"- mode: {summary['mode'] or 'unknown'}")
    lines.append(f"- config hash: `{summary['configHash'] or '-'}`")
    lines.append(f"- records: {summary['records']} ({summary['ok']} ok, {summary['failed']} failed)")
    lines.append(f"- skipped records: {summary['skipped']}")
    if summary["missingIndices"]:
        lines.append(f"- missing replication indices: {summary['missingIndices']}")
    lines.append("")

    for name, frame in tables.items():
        lines.append(f"## {name.replace('_', ' ').capitalize()}")
        lines.append("")
        lines.extend(_markdown_table(frame))
        lines.append("")
        for column, doc in TABLE_COLUMNS[name].items():
            lines.append(f"- `{column}`: {doc}")
        lines.append("")

    if summary["flagCounts"]:
        lines.append("## Flags")
        lines.append("")
        for flag, count in sorted(summary["flagCounts"].items()):
            lines.append(f"- {flag}: {count}")
        lines.append("")

    if summary["failures"]:
        lines.append("## Failures")
        lines.append("")
        for error, count in sorted(summary["failures"].items()):
            lines.append(f"- {error}: {count}")
        lines.append("")

    return "\n".join(lines)


def summarize(
    records: list[RunRecord], skipped: int, config: Optional[ExperimentConfig] = None
) -> tuple[dict[str, Any], dict[str, pd.DataFrame]]:
    """Summary numbers and every table for the given records, ordered by replication index."""
    records = sorted(records, key=lambda r: r.index)
    payloads = _payloads(records)
    mode = config.experiment_mode if config is not None else _infer_mode(payloads)

    summary: dict[str, Any] = {
        "mode": mode.value if mode is not None else None,
        "configHash": config.config_hash() if config is not None else None,
        "records": len(records),
        "ok": len(payloads),
        "failed": len(records) - len(payloads),
        "skipped": skipped,
        "missingIndices": [],
        "flagCounts": dict(Counter(f for r in records for f, on in r.flags.items() if on)),
        "failures": dict(Counter(r.failure["error"] for r in records if r.failure)),
    }
    if config is not None:
        expected = 1 if mode in (ExperimentMode.BOUND, ExperimentMode.CURVATURE) else config.reps
        present = {r.index for r in records}
        summary["missingIndices"] = [i for i in range(expected) if i not in present]

    statistics = [p["statistic"] for p in payloads if p.get("statistic") is not None]
    qq = qq_rows(statistics)
    size_coverage = rejection_rows(statistics) if statistics else []
    size_coverage += coverage_rows(payloads)
    tables = {
        "size_coverage": _frame("size_coverage", size_coverage),
        "qq": _frame("qq", qq),
        "estimates": _frame("estimates", estimate_rows(payloads)),
    }
    summary["rejectionRates"] = {f"{r['nominal']:g}": r["rate"] for r in size_coverage if r["quantity"] == "qlr_rejection"}
    summary["qqCorrelation"] = qq_correlation(qq)
    summary["coverage"] = [
        {k: r[k] for k in ("quantity", "nominal", "rate", "mean_length")}
        for r in size_coverage
        if r["quantity"] != "qlr_rejection"
    ]
    estimates = tables["estimates"]
    summary["estimates"] = estimates.iloc[0].to_dict() if not estimates.empty else None

    if mode is ExperimentMode.BOUND and payloads:
        for name, rows in _bound_tables(payloads[0]).items():
            tables[name] = _frame(name, rows)
        summary["bound"] = payloads[0]["bound"]
        summary["effectiveSieve"] = payloads[0].get("effectiveSieve")
    if mode is ExperimentMode.CURVATURE and payloads:
        for name, rows in _curvature_tables(payloads[0]).items():
            tables[name] = _frame(name, rows)
        summary["iLMinEig"] = payloads[0].get("iLMinEig")
    if mode is ExperimentMode.ALR:
        rows = _alr_rows(records)
        tables["alr"] = _frame("alr", rows)
        draws = [r["standardized"] for r in rows if r["standardized"] is not None]
        summary["ksDistance"] = float(stats.kstest(draws, "norm").statistic) if len(draws) >= 2 else None
        summary["normalQqCorrelation"] = normal_qq_correlation(draws)
        gaps = [r["scaled_gap"] for r in rows if r["scaled_gap"] is not None]
        summary["meanAbsScaledGap"] = float(np.mean(np.abs(gaps))) if gaps else None
    return summary, tables


def write_report(
    results_dir: Path,
    records: list[RunRecord],
    skipped: int,
    config: Optional[ExperimentConfig] = None,
) -> dict[str, Any]:
    """
    Write summary.json, one CSV per table and report.md into ``results_dir``.

    Without a config the one saved next to the records is used when present.
    """
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    if config is None and (results_dir / "config.json").exists():
        config = ExperimentConfig.load(results_dir / "config.json")

    summary, tables = summarize(records, skipped, config)
    for name, frame in tables.items():
        _write_table(results_dir, name, frame, skipped)
    with open(results_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(json_safe(summary), f, indent=2, sort_keys=True)
    (results_dir / "report.md").write_text(render_markdown(summary, tables), encoding="utf-8")
    logger.info("Wrote summary and %d tables to %s", len(tables), results_dir)
    return summary

