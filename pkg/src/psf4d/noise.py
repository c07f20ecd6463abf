"""Structured Gaussian noise over (view, window) grids.

Latent video here is organized as K camera views, each split into n
windows of w frames. Two couplings are layered onto otherwise i.i.d.
standard normals, both preserving unit marginal variance exactly:

* a first-order autoregression across the window axis, applied per view
  at window granularity (every element of window i - 1 feeds the same
  position of window i), with mixing weight ``gamma``;
* a per-window component shared by all views, with weight ``lam``: the
  shared draw has variance lam and each view adds an independent
  remainder scaled by sqrt(1 - lam).

The shared component either resets every window (independent draws) or
follows the same autoregression across windows, selected by
``shared_temporal_mode``.

Every (view, window) block draws from its own counter-based stream, so
results do not depend on evaluation order and parallel callers get the
same tensor as serial ones.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ParameterError, ShapeError
from .rng import ROLE_AR_INNOVATION, ROLE_SHARED, RngState, stream_id
from .tensor import load_tensor, save_tensor, standard_normal
from .validation import (
    check_array,
    check_choice,
    check_nonnegative_int,
    check_positive_int,
    check_unit_halfopen,
)

SHARED_MODES = ("independent_per_window", "ar_chained")


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
    """Geometry and coupling strengths for one structured-noise tensor.

    gamma and lam live in [0, 1); zero switches the respective coupling
    off and recovers plain i.i.d. normals when both are zero.
    """

    gamma: float = 0.65
    lam: float = 0.7
    views: int = 4
    windows: int = 6
    frames_per_window: int = 8
    channels: int = 4
    height: int = 8
    width: int = 8
    seed: int = 0
    shared_temporal_mode: str = "independent_per_window"

    def __post_init__(self):
        object.__setattr__(self, "gamma", check_unit_halfopen(self.gamma, "gamma"))
        object.__setattr__(self, "lam", check_unit_halfopen(self.lam, "lambda"))
        for field in ("views", "windows", "frames_per_window", "channels", "height", "width"):
            object.__setattr__(self, field, check_positive_int(getattr(self, field), field))
        object.__setattr__(self, "seed", check_nonnegative_int(self.seed, "seed"))
        check_choice(self.shared_temporal_mode, "shared_temporal_mode", SHARED_MODES)

    @property
    def block_shape(self) -> tuple[int, int, int, int]:
        """Shape of one (view, window) block: (w, C, H, W)."""
        return (self.frames_per_window, self.channels, self.height, self.width)

    @property
    def tensor_shape(self) -> tuple[int, ...]:
        return (self.views, self.windows) + self.block_shape

    @property
    def block_elements(self) -> int:
        return int(np.prod(self.block_shape))

    def to_sidecar(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "K": self.views,
            "n": self.windows,
            "w": self.frames_per_window,
            "C": self.channels,
            "H": self.height,
            "W": self.width,
            "seed": self.seed,
            "shared_temporal_mode": self.shared_temporal_mode,
        }

    @classmethod
    def from_sidecar(cls, record: dict) -> "NoiseConfig":
        try:
            return cls(
                gamma=record["gamma"],
                lam=record["lambda"],
                views=record["K"],
                windows=record["n"],
                frames_per_window=record["w"],
                channels=record["C"],
                height=record["H"],
                width=record["W"],
                seed=record["seed"],
                shared_temporal_mode=record["shared_temporal_mode"],
            )
        except KeyError as exc:
            raise ParameterError(f"noise sidecar is missing key {exc}")


def _ar_stream(epoch: int, view: int, window: int) -> int:
    return stream_id((ROLE_AR_INNOVATION << 8) | epoch, view, window)


def _shared_stream(epoch: int, window: int) -> int:
    return stream_id((ROLE_SHARED << 8) | epoch, 0, window)


def _check_epoch(epoch: int) -> int:
    epoch = check_nonnegative_int(epoch, "epoch")
    if epoch >= 256:
        raise ParameterError(f"epoch {epoch} outside [0, 256)")
    return epoch


def sample_ar(config: NoiseConfig, seed: int | None = None, epoch: int = 0) -> np.ndarray:
    """Per-view noise with window-level AR(1) structure.

    Returns [K, n, w, C, H, W]. Window 0 of every view is a fresh draw;
    window i mixes window i - 1 with weight gamma and a fresh innovation
    with weight sqrt(1 - gamma^2), elementwise over the whole block, so
    every marginal stays exactly N(0, 1).
    """
    epoch = _check_epoch(epoch)
    master = config.seed if seed is None else check_nonnegative_int(seed, "seed")
    gamma = config.gamma
    carry_w = math.sqrt(1.0 - gamma * gamma)
    out = np.empty(config.tensor_shape, dtype=np.float64)
    for k in range(config.views):
        for i in range(config.windows):
            rng = RngState(master, _ar_stream(epoch, k, i))
            eta = standard_normal(config.block_shape, rng)
            if i == 0:
                out[k, i] = eta
            else:
                out[k, i] = gamma * out[k, i - 1] + carry_w * eta
    return out


def apply_cross_view(
    config: NoiseConfig,
    per_view: np.ndarray,
    seed: int | None = None,
    epoch: int = 0,
) -> np.ndarray:
    """Blend a shared per-window component into per-view noise.

    For each window a single shared block of variance lam is drawn (one
    draw, reused by all K views) and combined with the per-view input:
    shared + sqrt(1 - lam) * per_view. Feeding unit-variance input keeps
    unit marginal variance. With lam = 0 the input comes back unchanged.
    """
    epoch = _check_epoch(epoch)
    master = config.seed if seed is None else check_nonnegative_int(seed, "seed")
    per_view = check_array(per_view, "per_view", shape=config.tensor_shape)
    lam = config.lam
    shared_scale = math.sqrt(lam)
    indep_scale = math.sqrt(1.0 - lam)
    gamma = config.gamma
    carry_w = math.sqrt(1.0 - gamma * gamma)
    out = np.empty_like(per_view)
    chain = None
    for i in range(config.windows):
        rng = RngState(master, _shared_stream(epoch, i))
        zeta = standard_normal(config.block_shape, rng)
        if config.shared_temporal_mode == "ar_chained":
            chain = zeta if chain is None else gamma * chain + carry_w * zeta
            shared = shared_scale * chain
        else:
            shared = shared_scale * zeta
        out[:, i] = shared[None] + indep_scale * per_view[:, i]
    return out


@dataclasses.dataclass
class StructuredNoise:
    """A sampled noise tensor together with the config that produced it."""

    values: np.ndarray
    config: NoiseConfig

    def __post_init__(self):
        self.values = check_array(self.values, "values", shape=self.config.tensor_shape)

    def block(self, view: int, window: int) -> np.ndarray:
        return self.values[view, window]

    def save(self, prefix: str | os.PathLike) -> None:
        """Write <prefix>.psf4d (tensor) and <prefix>.json (sidecar)."""
        prefix = os.fspath(prefix)
        save_tensor(prefix + ".psf4d", self.values)
        with open(prefix + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.config.to_sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, prefix: str | os.PathLike) -> "StructuredNoise":
        prefix = os.fspath(prefix)
        values = load_tensor(prefix + ".psf4d")
        with open(prefix + ".json", "r", encoding="utf-8") as fh:
            config = NoiseConfig.from_sidecar(json.load(fh))
        if values.shape != config.tensor_shape:
            raise ShapeError(
                f"tensor shape {values.shape} does not match sidecar {config.tensor_shape}"
            )
        return cls(values, config)


def sample_structured(
    config: NoiseConfig, seed: int | None = None, epoch: int = 0
) -> StructuredNoise:
    """Full structured draw: AR across windows, then cross-view sharing."""
    per_view = sample_ar(config, seed=seed, epoch=epoch)
    mixed = apply_cross_view(config, per_view, seed=seed, epoch=epoch)
    return StructuredNoise(mixed, config)


def theoretical_correlation(
    config: NoiseConfig, view_a: int, window_i: int, view_b: int, window_j: int
) -> float:
    """Exact elementwise correlation between two (view, window) blocks.

    Derived from the two-stage construction: within one view the AR
    recursion contributes gamma^|i-j|, across views only the shared
    component correlates, and the shared component carries gamma^|i-j|
    across windows only in ar_chained mode.
    """
    for idx, bound, name in (
        (view_a, config.views, "view_a"),
        (view_b, config.views, "view_b"),
        (window_i, config.windows, "window_i"),
        (window_j, config.windows, "window_j"),
    ):
        idx = check_nonnegative_int(idx, name)
        if idx >= bound:
            raise ParameterError(f"{name}={idx} outside [0, {bound})")
    d = abs(window_i - window_j)
    if window_i == window_j:
        shared_term = 1.0
    elif config.shared_temporal_mode == "ar_chained":
        shared_term = config.gamma**d
    else:
        shared_term = 0.0
    if view_a == view_b:
        return config.lam * shared_term + (1.0 - config.lam) * config.gamma**d
    return config.lam * shared_term


def correlation_table(config: NoiseConfig) -> np.ndarray:
    """Theoretical correlations for all (view, window) slice pairs.

    Returned as a [K*n, K*n] matrix with slices ordered view-major.
    """
    kn = config.views * config.windows
    table = np.empty((kn, kn), dtype=np.float64)
    for p in range(kn):
        a, i = divmod(p, config.windows)
        for q in range(kn):
            b, j = divmod(q, config.windows)
            table[p, q] = theoretical_correlation(config, a, i, b, j)
    return table


def empirical_correlation_table(samples: np.ndarray) -> np.ndarray:
    """Pearson correlations between flattened (view, window) slices.

    ``samples`` is [R, K, n, ...block] holding R independent draws; the
    R and block axes are pooled per slice. Slices with zero variance
    yield NaN entries rather than raising, so callers can report which
    pair is degenerate.
    """
    if samples.ndim < 4:
        raise ShapeError(
            f"samples must be [draws, views, windows, ...], got shape {samples.shape}"
        )
    reps, views, windows = samples.shape[:3]
    flat = samples.reshape(reps, views * windows, -1)
    pooled = np.swapaxes(flat, 0, 1).reshape(views * windows, -1)
    centered = pooled - pooled.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = centered / norms[:, None]
        table = unit @ unit.T
    table[norms == 0.0, :] = np.nan
    table[:, norms == 0.0] = np.nan
    return table


class StructuredNoiseSampler(BaseEstimator):
    """Estimator-style front end over the structured-noise functions.

    Parameters mirror NoiseConfig; ``sample`` draws one structured
    tensor, ``sample_many`` stacks independent draws for statistics.
    Stateless apart from its parameters, so clones behave identically.
    """

    def __init__(
        self,
        gamma: float = 0.65,
        lam: float = 0.7,
        views: int = 4,
        windows: int = 6,
        frames_per_window: int = 8,
        channels: int = 4,
        height: int = 8,
        width: int = 8,
        seed: int = 0,
        shared_temporal_mode: str = "independent_per_window",
    ):
        self.gamma = gamma
        self.lam = lam
        self.views = views
        self.windows = windows
        self.frames_per_window = frames_per_window
        self.channels = channels
        self.height = height
        self.width = width
        self.seed = seed
        self.shared_temporal_mode = shared_temporal_mode

    def to_config(self) -> NoiseConfig:
        return NoiseConfig(**self.get_params())

    def sample(self, epoch: int = 0) -> StructuredNoise:
        return sample_structured(self.to_config(), epoch=epoch)

    def sample_many(self, draws: int) -> np.ndarray:
        """Independent draws stacked on a leading axis: [draws, K, n, ...].

        Draw r uses seed + r, keeping every draw reproducible in
        isolation.
        """
        draws = check_positive_int(draws, "draws")
        config = self.to_config()
        out = np.empty((draws,) + config.tensor_shape, dtype=np.float64)
        for r in range(draws):
            out[r] = sample_structured(config, seed=config.seed + r).values
        return out
