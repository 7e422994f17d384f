from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

Z_95 = 1.96


class LatencyStats(BaseModel):
    """Latency summary in milliseconds."""

    n: int = Field(..., description="Number of samples.")
    mean_ms: float = Field(..., description="Sample mean.")
    sd_ms: float = Field(..., description="Sample standard deviation (n - 1 denominator, 0 for one sample).")
    ci95_ms: float = Field(..., description="Half width of the 95% confidence interval, 1.96 * sd / sqrt(n).")
    median_ms: float = Field(..., description="Sample median.")

    def __str__(self) -> str:
        return f"{self.mean_ms:.3f} ± {self.ci95_ms:.3f}"


def latency_stats(samples_us: Sequence[float]) -> LatencyStats:
    samples = np.asarray(samples_us, dtype=np.float64) / 1000.0
    if samples.size == 0:
        raise ValueError("latency_stats needs at least one sample")
    sd = float(samples.std(ddof=1)) if samples.size > 1 else 0.0
    return LatencyStats(
        n=int(samples.size),
        mean_ms=float(samples.mean()),
        sd_ms=sd,
        ci95_ms=Z_95 * sd / float(np.sqrt(samples.size)),
        median_ms=float(np.median(samples)),
    )


def latency_table(rows: List[Dict]) -> pd.DataFrame:
    """Latency per scenario and configuration, formatted like "mean ± ci"."""
    return pd.DataFrame(rows, columns=["scenario", "mode", "messages", "latency_ms", "median_ms"])


def detection_table(rows: List[Dict], modes: Sequence[str] = ("passthrough", "gateway", "gateway+spec")) -> pd.DataFrame:
    """One row per attack scenario, one column per configuration, "Yes"/"No" cells."""
    if not rows:
        return pd.DataFrame(columns=["scenario"])
    frame = pd.DataFrame(rows)
    table = frame.pivot(index="scenario", columns="mode", values="detected")
    table = table[[m for m in modes if m in table.columns]]
    table = table.apply(lambda column: column.map(lambda hit: "Yes" if hit else "No"))
    return table.reset_index()


def render_table(frame: pd.DataFrame) -> str:
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False)
