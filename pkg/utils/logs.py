"""
utils/logs.py · Logging setup and CSV metric logs for ConDA Desk
"""

import logging
import os
from pathlib import Path

import pandas as pd

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVEL = os.getenv("CONDA_DESK_LOG_LEVEL", "INFO")

# Leading columns of every metric log; per-class IoU columns follow.
METRIC_COLUMNS = ["epoch", "split", "round", "loss", "miou", "fiou"]


def setup_logging(run_dir=None, level: str = LOG_LEVEL) -> None:
    """Configure the root logger: stderr always, `run.log` when a run dir is given."""
    root = logging.getLogger()
    root.setLevel(level.upper())
    for h in list(root.handlers):
        root.removeHandler(h)

    fmt = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler()
    stream.setFormatter(fmt)
    root.addHandler(stream)

    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(Path(run_dir) / "run.log", mode="a", encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def append_rows(path, rows: list) -> pd.DataFrame:
    """
    Append rows (list of dicts) to a CSV, writing the header only on creation.

    Column order: METRIC_COLUMNS first (those present), then the rest sorted.
    """
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    lead = [c for c in METRIC_COLUMNS if c in df.columns]
    rest = sorted(c for c in df.columns if c not in lead)
    df = df[lead + rest]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.10g")
    return df


def read_log(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        return pd.DataFrame(columns=METRIC_COLUMNS)
    return pd.read_csv(path)
