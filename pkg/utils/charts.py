"""
utils/charts.py · Plotly figures for ConDA Desk run artifacts

Standalone HTML next to the CSV it plots.
"""

from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

BG    = "#0d0d1a"
BG2   = "#13132b"
GRID  = "#1e1e3a"
TEXT  = "#e8e8f0"
MUTED = "#6b6b8a"

CLASS_COLORS = {
    "ground":     "#6b6b8a",
    "vehicle":    "#3b82f6",
    "pole":       "#f59e0b",
    "wall":       "#ef4444",
    "vegetation": "#10b981",
}

SERIES_COLORS = ["#00d4ff", "#10b981", "#f59e0b", "#ef4444", "#a78bfa", "#f97316"]


def make_layout(height=400, title=None):
    return dict(
        title=dict(text=title, font=dict(color=TEXT, size=13)) if title else None,
        paper_bgcolor=BG,
        plot_bgcolor=BG2,
        font=dict(color=TEXT, size=11),
        xaxis=dict(gridcolor=GRID, linecolor=GRID),
        yaxis=dict(gridcolor=GRID, linecolor=GRID, zeroline=True, zerolinecolor="#444466"),
        legend=dict(
            bgcolor="rgba(0,0,0,0)",
            font=dict(color=TEXT, size=10),
            orientation="h",
            yanchor="bottom", y=1.02,
            xanchor="left", x=0,
        ),
        hovermode="x unified",
        height=height,
        margin=dict(l=50, r=20, t=60, b=40),
    )


def write_html(fig: go.Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs=True, full_html=True)
    return path


def sweep_figure(df: pd.DataFrame, axis: str) -> go.Figure:
    """Target mIoU (and FIoU when present) per swept value."""
    x = [str(v) for v in df["value"]]
    fig = go.Figure()
    for i, col in enumerate(c for c in ("miou", "fiou") if c in df.columns):
        fig.add_trace(go.Scatter(
            name=col.upper(), x=x, y=df[col] * 100, mode="lines+markers",
            line=dict(color=SERIES_COLORS[i], width=2),
            hovertemplate=f"<b>{col.upper()}</b>: %{{y:.2f}}<extra></extra>",
        ))
    fig.update_layout(**make_layout(360, f"sweep over {axis}"))
    fig.update_yaxes(title_text="%")
    return fig


def occupancy_figure(df: pd.DataFrame) -> go.Figure:
    """Empty fraction per region, plus stacked class shares when the report carries them."""
    regions = [f"r{r}c{c}" for r, c in zip(df["row_band"], df["col_band"])]
    class_cols = [c for c in df.columns if c.startswith("class_")]
    fig = go.Figure()
    fig.add_trace(go.Bar(name="empty", x=regions, y=df["empty_fraction"], marker_color=MUTED))
    names = list(CLASS_COLORS)
    for col in class_cols:
        idx = int(col.split("_", 1)[1])
        name = names[idx] if idx < len(names) else col
        occupied = 1.0 - df["empty_fraction"]
        fig.add_trace(go.Bar(name=name, x=regions, y=df[col] * occupied,
                             marker_color=CLASS_COLORS.get(name, SERIES_COLORS[idx % len(SERIES_COLORS)])))
    fig.update_layout(**make_layout(380, "range-view occupancy by region"), barmode="stack")
    return fig


def training_figure(log: pd.DataFrame) -> go.Figure:
    """Loss and mIoU per epoch, one line per (round, split)."""
    fig = go.Figure()
    for i, ((rnd, split), part) in enumerate(log.groupby(["round", "split"], sort=True)):
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        fig.add_trace(go.Scatter(name=f"r{rnd} {split} mIoU", x=part["epoch"], y=part["miou"] * 100,
                                 mode="lines+markers", line=dict(color=color, width=2)))
        if part["loss"].notna().any():
            fig.add_trace(go.Scatter(name=f"r{rnd} {split} loss", x=part["epoch"], y=part["loss"],
                                     mode="lines", yaxis="y2", line=dict(color=color, width=1, dash="dot")))
    fig.update_layout(**make_layout(380, "training log"),
                      yaxis2=dict(overlaying="y", side="right", gridcolor=GRID, showgrid=False))
    return fig
