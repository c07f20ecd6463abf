"""Consistency and fidelity metrics over windowed multi-view latents.

Everything here is a pure function of its inputs; nothing needs a
pretrained network. Latents arrive as [windows, frames_per_window, ...]
blocks (one view) or [views, windows, frames_per_window, ...] stacks.

Frame-to-frame jitter is measured on edit residuals, not raw frames, so
scene motion does not count as flicker. Two pair families contribute:
consecutive frames inside a window, and same-position frames in
adjacent windows. The families behave differently under window-level
correlated noise (the first sees independent elements, the second sees
the window-to-window coupling), so they are reported separately as
well as pooled.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math

import numpy as np
from scipy.ndimage import convolve1d

from .exceptions import NotSupportedError, ParameterError, ShapeError
from .noise import StructuredNoise
from .validation import check_array, check_positive_float, check_positive_int


def temporal_flicker_components(latents) -> dict:
    """Within-window and adjacent-window frame-pair differences.

    Returns per-family mean squared differences (NaN when a family has
    no pairs), the pooled mean over every pair, and the pair counts.
    """
    x = check_array(latents, "latents")
    if x.ndim < 2:
        raise ShapeError(
            f"latents must be [windows, frames_per_window, ...], got shape {x.shape}"
        )
    n, w = x.shape[0], x.shape[1]
    if n * w < 2:
        raise NotSupportedError("flicker of a single frame is undefined")
    flat = x.reshape(n, w, -1)
    per_pair = []
    within = math.nan
    if w >= 2:
        diffs = np.square(flat[:, 1:] - flat[:, :-1]).mean(axis=2).reshape(-1)
        within = float(diffs.mean())
        per_pair.append(diffs)
    adjacent = math.nan
    if n >= 2:
        diffs = np.square(flat[1:] - flat[:-1]).mean(axis=2).reshape(-1)
        adjacent = float(diffs.mean())
        per_pair.append(diffs)
    pooled = np.concatenate(per_pair)
    return {
        "within_window": within,
        "adjacent_window": adjacent,
        "pooled": float(pooled.mean()),
        "pairs_within": n * (w - 1),
        "pairs_adjacent": (n - 1) * w,
    }


def temporal_flicker(latents) -> float:
    """Mean squared difference over all consecutive frame pairs."""
    return temporal_flicker_components(latents)["pooled"]


def flicker_report(residuals) -> tuple[tuple[float, ...], float]:
    """Per-view flicker plus the pooled value over a [K, n, w, ...] stack."""
    x = check_array(residuals, "residuals")
    if x.ndim < 3:
        raise ShapeError(
            f"residuals must be [views, windows, frames_per_window, ...], got {x.shape}"
        )
    per_view = tuple(temporal_flicker(view) for view in x)
    components = [temporal_flicker_components(view) for view in x]
    weights = [c["pairs_within"] + c["pairs_adjacent"] for c in components]
    pooled = float(
        sum(w * c["pooled"] for w, c in zip(weights, components)) / sum(weights)
    )
    return per_view, pooled


def cross_view_inconsistency(views, view_maps=None) -> float:
    """Disagreement between views after pulling each back to canonical space.

    ``view_maps[k]`` must expose ``inverse_apply`` (see the scene module);
    None means the views are already canonical. The returned scalar is
    the mean over canonical positions of the population variance across
    views (deviation from the cross-view mean, squared, averaged with
    the K divisor).
    """
    x = check_array(views, "views")
    if x.ndim < 2:
        raise ShapeError(f"views must be [views, ...], got shape {x.shape}")
    K = x.shape[0]
    if K < 2:
        raise NotSupportedError("inconsistency needs at least two views")
    if view_maps is not None:
        if len(view_maps) != K:
            raise ShapeError(f"got {K} views but {len(view_maps)} maps")
        x = np.stack(
            [m.inverse_apply(view) for m, view in zip(view_maps, x)], axis=0
        )
    mean = x.mean(axis=0)
    return float(np.square(x - mean).mean())


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give inf."""
    a = check_array(a, "a")
    b = check_array(b, "b", shape=a.shape)
    peak = check_positive_float(peak, "peak")
    if a.size == 0:
        raise ShapeError("psnr of an empty tensor is undefined")
    mse = float(np.square(a - b).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    offsets = np.arange(window) - half
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def _local_mean(image: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = convolve1d(image, taps, axis=0, mode="reflect")
    return convolve1d(out, taps, axis=1, mode="reflect")


def ssim(
    a,
    b,
    peak: float = 1.0,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity over Gaussian-weighted local windows.

    The canonical formulation: local means, variances, and covariance
    from a separable window-tap Gaussian (reflect padding), stabilizers
    C1 = (0.01 peak)^2 and C2 = (0.03 peak)^2. Inputs are 2-D images of
    at least the window size.
    """
    a = check_array(a, "a", ndim=2)
    b = check_array(b, "b", shape=a.shape)
    peak = check_positive_float(peak, "peak")
    window = check_positive_int(window, "window")
    sigma = check_positive_float(sigma, "sigma")
    if min(a.shape) < window:
        raise NotSupportedError(
            f"images of shape {a.shape} are smaller than the {window}-tap window"
        )
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    taps = _gaussian_taps(window, sigma)
    mu_a = _local_mean(a, taps)
    mu_b = _local_mean(b, taps)
    var_a = _local_mean(a * a, taps) - mu_a * mu_a
    var_b = _local_mean(b * b, taps) - mu_b * mu_b
    cov = _local_mean(a * b, taps) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((numerator / denominator).mean())


def empirical_correlation(
    noise: StructuredNoise,
    view_a: int,
    window_a: int,
    view_b: int,
    window_b: int,
) -> float:
    """Pearson correlation between two (view, window) blocks of one draw."""
    x = noise.block(view_a, window_a).reshape(-1)
    y = noise.block(view_b, window_b).reshape(-1)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = float(np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    if denom == 0.0:
        raise NotSupportedError("a block has zero variance")
    return float(np.dot(xc, yc) / denom)


_CSV_COLUMNS = ("metric", "scope", "value")


@dataclasses.dataclass
class MetricsReport:
    """Bundle of the consistency metrics for one pipeline output.

    ``flicker_per_view`` is ordered by view index; ``sample_counts``
    records how many elements went into each figure. Serializes to JSON
    (sorted keys) and CSV with columns metric, scope, value in a fixed
    row order: flicker pooled, flicker per view, inconsistency, psnr,
    ssim, then sample counts.
    """

    flicker_per_view: tuple[float, ...]
    flicker_pooled: float
    cross_view_inconsistency: float
    psnr: float
    ssim: float
    sample_counts: dict[str, int] = dataclasses.field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "flicker_per_view": list(self.flicker_per_view),
            "flicker_pooled": self.flicker_pooled,
            "cross_view_inconsistency": self.cross_view_inconsistency,
            "psnr": None if math.isinf(self.psnr) else self.psnr,
            "psnr_is_infinite": math.isinf(self.psnr),
            "ssim": self.ssim,
            "sample_counts": dict(self.sample_counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_record(cls, record: dict) -> "MetricsReport":
        value = record["psnr"]
        if record.get("psnr_is_infinite"):
            value = math.inf
        return cls(
            flicker_per_view=tuple(record["flicker_per_view"]),
            flicker_pooled=record["flicker_pooled"],
            cross_view_inconsistency=record["cross_view_inconsistency"],
            psnr=value,
            ssim=record["ssim"],
            sample_counts=dict(record.get("sample_counts", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_record(json.loads(text))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        writer.writerow(["temporal_flicker", "pooled", repr(self.flicker_pooled)])
        for k, value in enumerate(self.flicker_per_view):
            writer.writerow(["temporal_flicker", f"view_{k}", repr(value)])
        writer.writerow(
            ["cross_view_inconsistency", "pooled", repr(self.cross_view_inconsistency)]
        )
        writer.writerow(["psnr", "pooled", "inf" if math.isinf(self.psnr) else repr(self.psnr)])
        writer.writerow(["ssim", "pooled", repr(self.ssim)])
        for key in sorted(self.sample_counts):
            writer.writerow(["sample_count", key, str(self.sample_counts[key])])
        return buffer.getvalue()
