"""Calibration metrics for peak p-values: pp curves, mean ratio, RMSE, Kolmogorov distance, BH."""

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, NamedTuple, Tuple

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from scipy import stats

from .config import settings
from .errors import InvalidInputError
from .storage import atomic_write_bytes

logger = logging.getLogger(__name__)

_STYLES = (
    {"color": "#1f77b4", "linestyle": "-"},
    {"color": "#d62728", "linestyle": "--"},
    {"color": "#2ca02c", "linestyle": "-."},
    {"color": "#9467bd", "linestyle": ":"},
    {"color": "#ff7f0e", "linestyle": "-"},
)


def _as_pvalues(p, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise InvalidInputError(f"{name} p-values must lie in [0, 1]")
    return arr


@dataclass(frozen=True, eq=False)
class PPData:
    """Method p-values paired with reference p-values, ordered by reference p."""

    reference: np.ndarray
    methods: Dict[str, np.ndarray]
    uniform: np.ndarray  # i/n plotting positions
    sorted_methods: Dict[str, np.ndarray]

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(self.methods)

    @property
    def size(self) -> int:
        return int(self.reference.size)

    def mechanism_gap(self, label: str) -> float:
        """Sup distance between the reference-paired curve and the i/n curve"""
        paired = np.interp(self.uniform, self.reference, self.methods[label])
        return float(np.max(np.abs(paired - self.sorted_methods[label])))


def pp_data(reference_p, method_p: Mapping[str, np.ndarray]) -> PPData:
    ref = _as_pvalues(reference_p, "reference")
    if ref.size == 0:
        raise InvalidInputError("No reference p-values")
    order = np.argsort(ref, kind="stable")
    methods, sorted_methods = {}, {}
    for label, p in method_p.items():
        arr = _as_pvalues(p, label)
        if arr.size != ref.size:
            raise InvalidInputError(f"Method '{label}' has {arr.size} p-values, reference has {ref.size}")
        methods[label] = arr[order]
        sorted_methods[label] = np.sort(arr)
    n = ref.size
    return PPData(ref[order], methods, np.arange(1, n + 1) / n, sorted_methods)


def _window(reference_p, method_p, window) -> Tuple[np.ndarray, np.ndarray]:
    ref = _as_pvalues(reference_p, "reference")
    meth = _as_pvalues(method_p, "method")
    if ref.size != meth.size:
        raise InvalidInputError("Reference and method p-values differ in length")
    lo, hi = window if window is not None else (settings.PVALUE_WINDOW_LOW, settings.PVALUE_WINDOW_HIGH)
    sel = (ref > lo) & (ref <= hi)
    if not sel.any():
        raise InvalidInputError(f"No reference p-values in ({lo}, {hi}]")
    return ref[sel], meth[sel]


def mean_ratio(reference_p, method_p, window=None) -> float:
    """Mean of method p / reference p over reference p in (low, high]; 1.0 is exact"""
    ref, meth = _window(reference_p, method_p, window)
    return float(np.mean(meth / ref))


def rmse_identity(reference_p, method_p, window=None) -> float:
    ref, meth = _window(reference_p, method_p, window)
    return float(np.sqrt(np.mean((meth - ref) ** 2)))


def kolmogorov(samples, cdf: Callable) -> float:
    return float(stats.kstest(np.asarray(samples, dtype=np.float64), cdf).statistic)


def kolmogorov_2samp(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)).statistic)


class BHResult(NamedTuple):
    rejected: np.ndarray
    adjusted: np.ndarray
    n_rejected: int


def bh_adjust(pvalues, alpha: float = None) -> BHResult:
    """Benjamini-Hochberg step-up: reject the k smallest, k the largest with p_(k) <= k alpha / m"""
    alpha = settings.FDR_ALPHA if alpha is None else alpha
    p = _as_pvalues(pvalues, "input")
    m = p.size
    if m == 0:
        return BHResult(np.zeros(0, dtype=bool), np.zeros(0), 0)
    adjusted = stats.false_discovery_control(p, method="bh")
    order = np.argsort(p, kind="stable")
    below = np.flatnonzero(p[order] <= alpha * np.arange(1, m + 1) / m)
    rejected = np.zeros(m, dtype=bool)
    if below.size:
        k = int(below[-1]) + 1
        rejected[order[:k]] = True
    return BHResult(rejected, adjusted, int(rejected.sum()))


def render_pp_svg(data: PPData, title: str = "") -> bytes:
    """SVG bytes of the pp plot; byte-identical for identical input"""
    with matplotlib.rc_context({"svg.hashsalt": "latmax", "svg.fonttype": "none"}):
        fig = Figure(figsize=(5, 5))
        ax = fig.add_subplot()
        ax.plot([0, 1], [0, 1], color="black", linewidth=0.8, gid="identity")
        for i, label in enumerate(data.labels):
            style = _STYLES[i % len(_STYLES)]
            ax.plot(data.reference, data.methods[label], linewidth=1.2, label=label, gid=f"method-{label}", **style)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("reference p-value")
        ax.set_ylabel("method p-value")
        if title:
            ax.set_title(title)
        if data.labels:
            ax.legend(loc="upper left")
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_pp_svg(data: PPData, path, title: str = "") -> Path:
    path = Path(path)
    atomic_write_bytes(path, render_pp_svg(data, title))
    logger.info(f"Wrote pp plot with {len(data.labels)} method(s) to {path}")
    return path
