"""End-to-end edit loop over a synthetic multi-view latent scene.

One run proceeds as: render observed views, re-noise them at the edit
timestep with a structured draw, denoise toward the edit target with the
Gaussian-oracle predictor, then repeat a fixed number of refinement
passes. Each pass re-noises the current consensus renders with a fresh
epoch-salted draw, denoises, blends the result with the previous latents
under a decreasing weight, fits the consensus scene model on the blend,
and re-renders. Only the blend weight changes across passes, so the
residual noise footprint shrinks geometrically while the edit target is
held fixed.

All orchestration is deterministic given the seed: randomness enters
only through the structured-noise draws, whose streams are keyed by
(seed, epoch, view, window).
"""

from __future__ import annotations

import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .exceptions import ParameterError, ShapeError
from .metrics import (
    MetricsReport,
    cross_view_inconsistency,
    flicker_report,
    psnr,
    ssim,
)
from .noise import NoiseConfig, sample_structured
from .scene import (
    EditOperator,
    SceneModel,
    SyntheticScene,
    default_scene,
    fit_scene_model,
    render_views,
)
from .schedule import DiffusionSchedule, GaussianOracle, ddim_sample, forward_diffuse
from .validation import (
    check_array,
    check_nonnegative_int,
    check_positive_float,
    check_positive_int,
)

ABLATIONS = ("no-anm", "no-cnm", "no-vcr")

DEFAULT_OMEGA_START = 0.9
DEFAULT_OMEGA_END = 0.6
DEFAULT_EDIT_FRACTION = 0.6


# ---------------------------------------------------------------------------
# rectification


def omega_schedule(
    iterations: int,
    start: float = DEFAULT_OMEGA_START,
    end: float = DEFAULT_OMEGA_END,
) -> tuple[float, ...]:
    """Blend weights for the refinement passes, linear from start to end.

    Both endpoints are included, so three iterations with the defaults
    give (0.9, 0.75, 0.6). Zero iterations give an empty schedule; one
    iteration uses the start value alone.
    """
    iterations = check_nonnegative_int(iterations, "iterations")
    for name, value in (("start", start), ("end", end)):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ParameterError(f"{name} must be a number, got {value!r}")
        if not 0.0 < float(value) <= 1.0:
            raise ParameterError(f"{name}={value} outside (0, 1]")
    if end > start:
        raise ParameterError(
            f"omega must not increase: start={start} < end={end}"
        )
    if iterations == 0:
        return ()
    if iterations == 1:
        return (float(start),)
    return tuple(float(w) for w in np.linspace(start, end, iterations))


def rectify(denoised: np.ndarray, previous: np.ndarray, omega: float) -> np.ndarray:
    """Blend a denoised proposal with the previous latents.

    omega = 1 returns the proposal, omega = 0 the previous latents; the
    output traces the straight segment between them.
    """
    denoised = check_array(denoised, "denoised")
    previous = check_array(previous, "previous", shape=denoised.shape)
    if isinstance(omega, bool) or not isinstance(omega, (int, float)):
        raise ParameterError(f"omega must be a number, got {omega!r}")
    omega = float(omega)
    if not 0.0 <= omega <= 1.0:
        raise ParameterError(f"omega={omega} outside [0, 1]")
    return omega * denoised + (1.0 - omega) * previous


# ---------------------------------------------------------------------------
# edit placement and denoising


def edit_timestep(schedule: DiffusionSchedule, fraction: float = DEFAULT_EDIT_FRACTION) -> int:
    """Largest sub-schedule member at or below fraction * T.

    Re-noising to a member keeps every denoising hop on the same grid
    the full chain uses.
    """
    if isinstance(fraction, bool) or not isinstance(fraction, (int, float)):
        raise ParameterError(f"fraction must be a number, got {fraction!r}")
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction={fraction} outside (0, 1]")
    cap = round(fraction * schedule.timesteps)
    members = [t for t in schedule.ddim_timesteps if t <= cap]
    if not members:
        raise ParameterError(
            f"no sub-schedule member at or below {cap}; raise fraction or ddim_steps"
        )
    return members[-1]


def _denoise_views(
    schedule: DiffusionSchedule,
    latents: np.ndarray,
    noise_values: np.ndarray,
    target: np.ndarray,
    sigma2: float,
    t_edit: int,
    threads: int,
) -> np.ndarray:
    """Re-noise each view at t_edit and denoise it toward its target."""

    def one(k: int) -> np.ndarray:
        z = forward_diffuse(schedule, latents[k], t_edit, noise_values[k])
        oracle = GaussianOracle(schedule, mu=target[k], sigma2=sigma2)
        return ddim_sample(schedule, z, oracle, from_t=t_edit)

    count = latents.shape[0]
    if threads == 1 or count == 1:
        parts = [one(k) for k in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, count)) as pool:
            parts = list(pool.map(one, range(count)))
    return np.stack(parts)


def initial_edit(
    views: np.ndarray,
    edit: EditOperator,
    noise_config: NoiseConfig,
    schedule: DiffusionSchedule,
    *,
    oracle_sigma2: float = 0.04,
    edit_fraction: float = DEFAULT_EDIT_FRACTION,
    seed: int = 0,
    epoch: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Produce the initial edited views from the observed ones.

    Each view is jumped to the edit timestep with its slice of one
    structured-noise draw, then denoised with the Gaussian oracle whose
    mean is the edit applied to that view. A tiny oracle_sigma2 makes
    the predictor exact and the output converge to the target plus the
    deterministic chain transport of the injected noise.
    """
    views = check_array(views, "views", ndim=6)
    if not isinstance(edit, EditOperator):
        raise ParameterError(f"edit must be an EditOperator, got {type(edit).__name__}")
    if views.shape != noise_config.tensor_shape:
        raise ShapeError(
            f"views shape {views.shape} does not match noise config "
            f"{noise_config.tensor_shape}"
        )
    sigma2 = check_positive_float(oracle_sigma2, "oracle_sigma2")
    threads = check_positive_int(threads, "threads")
    t_edit = edit_timestep(schedule, edit_fraction)
    noise = sample_structured(noise_config, seed=seed, epoch=epoch)
    target = edit.apply(views)
    return _denoise_views(schedule, views, noise.values, target, sigma2, t_edit, threads)


# ---------------------------------------------------------------------------
# refinement


@dataclasses.dataclass(frozen=True)
class RefinementState:
    """Latents and bookkeeping between refinement passes.

    ``latents_prev`` feeds the next pass; ``latents_denoised`` and
    ``latents_rectified`` are the intermediates of the pass that
    produced this state (absent on the initial state). ``scene_model``
    is the consensus fit on the rectified latents.
    """

    iteration: int
    omega_schedule: tuple[float, ...]
    latents_prev: np.ndarray
    latents_denoised: np.ndarray | None = None
    latents_rectified: np.ndarray | None = None
    scene_model: SceneModel | None = None

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omega_schedule)
        for idx, w in enumerate(omegas):
            if not 0.0 < w <= 1.0:
                raise ParameterError(f"omega[{idx}]={w} outside (0, 1]")
        if any(b > a for a, b in zip(omegas, omegas[1:])):
            raise ParameterError(f"omega schedule must be non-increasing: {omegas}")
        object.__setattr__(self, "omega_schedule", omegas)
        iteration = check_nonnegative_int(self.iteration, "iteration")
        if iteration > len(omegas):
            raise ParameterError(
                f"iteration {iteration} overflows a schedule of length {len(omegas)}"
            )
        object.__setattr__(self, "iteration", iteration)
        prev = check_array(self.latents_prev, "latents_prev", ndim=6)
        object.__setattr__(self, "latents_prev", prev)
        for name in ("latents_denoised", "latents_rectified"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(
                    self, name, check_array(value, name, shape=prev.shape)
                )

    @property
    def done(self) -> bool:
        return self.iteration >= len(self.omega_schedule)

    @property
    def next_omega(self) -> float:
        if self.done:
            raise ParameterError("refinement schedule already consumed")
        return self.omega_schedule[self.iteration]


def refine_step(
    state: RefinementState,
    view_maps,
    noise_config: NoiseConfig,
    schedule: DiffusionSchedule,
    target: np.ndarray,
    *,
    oracle_sigma2: float = 0.04,
    edit_fraction: float = DEFAULT_EDIT_FRACTION,
    seed: int = 0,
    threads: int = 1,
) -> RefinementState:
    """Advance one refinement pass: re-noise, denoise, blend, fit, render.

    The structured draw is salted with epoch = iteration + 1 so every
    pass sees fresh noise while the whole run stays a pure function of
    the seed. The returned state's latents_prev are the re-rendered
    consensus views; its rectified latents are what metrics should be
    measured on (the renders are cross-view consistent by construction).
    """
    if not isinstance(state, RefinementState):
        raise ParameterError(
            f"state must be a RefinementState, got {type(state).__name__}"
        )
    if state.done:
        raise ParameterError(
            f"iteration {state.iteration} overflows a schedule of length "
            f"{len(state.omega_schedule)}"
        )
    target = check_array(target, "target", shape=state.latents_prev.shape)
    if state.latents_prev.shape != noise_config.tensor_shape:
        raise ShapeError(
            f"latents shape {state.latents_prev.shape} does not match noise "
            f"config {noise_config.tensor_shape}"
        )
    sigma2 = check_positive_float(oracle_sigma2, "oracle_sigma2")
    threads = check_positive_int(threads, "threads")
    omega = state.next_omega
    t_edit = edit_timestep(schedule, edit_fraction)
    noise = sample_structured(noise_config, seed=seed, epoch=state.iteration + 1)
    denoised = _denoise_views(
        schedule, state.latents_prev, noise.values, target, sigma2, t_edit, threads
    )
    rectified = rectify(denoised, state.latents_prev, omega)
    model = fit_scene_model(rectified, view_maps)
    return RefinementState(
        iteration=state.iteration + 1,
        omega_schedule=state.omega_schedule,
        latents_prev=model.render(),
        latents_denoised=denoised,
        latents_rectified=rectified,
        scene_model=model,
    )


# ---------------------------------------------------------------------------
# configuration bundle


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Every knob of one run, with the documented defaults.

    The same keys appear in config files (flat ``key = value`` lines)
    and as CLI flags; ``from_text`` applies file values over defaults
    and the CLI applies flag values over both.
    """

    gamma: float = 0.65
    lam: float = 0.7
    views: int = 4
    windows: int = 6
    frames_per_window: int = 8
    channels: int = 4
    height: int = 16
    width: int = 16
    noise_floor: float = 0.0
    timesteps: int = 1000
    ddim_steps: int = 30
    edit_fraction: float = DEFAULT_EDIT_FRACTION
    refine_iterations: int = 3
    omega_start: float = DEFAULT_OMEGA_START
    omega_end: float = DEFAULT_OMEGA_END
    oracle_sigma2: float = 0.04
    edit_channel: int = 0
    edit_scale: float = 1.5
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        # deep validation happens in the objects built from these values;
        # here only the fields no factory checks
        check_nonnegative_int(self.refine_iterations, "refine_iterations")
        check_nonnegative_int(self.seed, "seed")
        check_positive_int(self.threads, "threads")
        edit_channel = check_nonnegative_int(self.edit_channel, "edit_channel")
        if edit_channel >= check_positive_int(self.channels, "channels"):
            raise ParameterError(
                f"edit_channel={edit_channel} outside the {self.channels} channels"
            )

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(
            gamma=self.gamma,
            lam=self.lam,
            views=self.views,
            windows=self.windows,
            frames_per_window=self.frames_per_window,
            channels=self.channels,
            height=self.height,
            width=self.width,
            seed=self.seed,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(timesteps=self.timesteps, ddim_steps=self.ddim_steps)

    def scene(self) -> SyntheticScene:
        return default_scene(
            views=self.views,
            windows=self.windows,
            frames_per_window=self.frames_per_window,
            channels=self.channels,
            height=self.height,
            width=self.width,
            noise_floor=self.noise_floor,
        )

    def edit(self) -> EditOperator:
        return EditOperator.channel_gain(
            self.edit_channel, self.edit_scale, channels=self.channels
        )

    def omegas(self) -> tuple[float, ...]:
        return omega_schedule(self.refine_iterations, self.omega_start, self.omega_end)

    def ablate(self, name: str) -> "PipelineConfig":
        """Return the arm with one mechanism switched off."""
        if name == "no-anm":
            return dataclasses.replace(self, gamma=0.0)
        if name == "no-cnm":
            return dataclasses.replace(self, lam=0.0)
        if name == "no-vcr":
            return dataclasses.replace(self, refine_iterations=0)
        raise ParameterError(f"unknown ablation {name!r}; choose from {ABLATIONS}")

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"{key} = {value}" for key, value in sorted(self.to_record().items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, record: dict) -> "PipelineConfig":
        return cls().updated(record)

    def updated(self, record: dict) -> "PipelineConfig":
        """Copy with the given keys replaced; values may be strings."""
        # every field has an int or float default, which fixes its type
        wants_int = {
            f.name: isinstance(f.default, int) for f in dataclasses.fields(self)
        }
        cleaned = {}
        for key, value in record.items():
            if key not in wants_int:
                raise ParameterError(f"unknown config key {key!r}")
            try:
                cleaned[key] = int(value) if wants_int[key] else float(value)
            except (TypeError, ValueError):
                kind = "an int" if wants_int[key] else "a float"
                raise ParameterError(
                    f"config key {key!r} needs {kind}, got {value!r}"
                ) from None
        return dataclasses.replace(self, **cleaned)

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Parse flat ``key = value`` lines; # starts a comment."""
        record = {}
        for lineno, raw in enumerate(io.StringIO(text), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"config line {lineno} is not key = value: {raw!r}")
            key, _, value = line.partition("=")
            record[key.strip()] = value.strip()
        return cls.from_record(record)


# ---------------------------------------------------------------------------
# full runs


@dataclasses.dataclass(frozen=True)
class IterationRecord:
    """Metrics snapshot after one pass (iteration 0 is the initial edit)."""

    iteration: int
    omega: float | None
    metrics: MetricsReport
    residual_rms: float

    def to_record(self) -> dict:
        record = self.metrics.to_record()
        record["iteration"] = self.iteration
        record["omega"] = self.omega
        record["residual_rms"] = self.residual_rms
        return record

    @classmethod
    def from_record(cls, record: dict) -> "IterationRecord":
        payload = dict(record)
        iteration = payload.pop("iteration")
        omega = payload.pop("omega")
        residual_rms = payload.pop("residual_rms")
        return cls(
            iteration=int(iteration),
            omega=None if omega is None else float(omega),
            metrics=MetricsReport.from_record(payload),
            residual_rms=float(residual_rms),
        )


@dataclasses.dataclass(frozen=True)
class PipelineResult:
    """Final model plus the per-iteration metrics trace.

    ``latents_history`` holds the latents each trace record was
    measured on, only when the run was asked to keep them.
    """

    config: PipelineConfig
    model: SceneModel
    trace: tuple[IterationRecord, ...]
    final_latents: np.ndarray
    latents_history: tuple[np.ndarray, ...] | None = None

    def trace_lines(self) -> str:
        """JSON-lines rendering of the trace, one record per iteration."""
        return "".join(
            json.dumps(record.to_record(), sort_keys=True) + "\n"
            for record in self.trace
        )


def _measure(
    iteration: int,
    omega: float | None,
    latents: np.ndarray,
    target: np.ndarray,
    view_maps,
    model: SceneModel,
) -> IterationRecord:
    """Metrics on pre-fit latents; renders would be trivially consistent."""
    residuals = latents - target
    per_view, pooled = flicker_report(residuals)
    spatial = min(latents.shape[-2:])
    report = MetricsReport(
        flicker_per_view=per_view,
        flicker_pooled=pooled,
        cross_view_inconsistency=cross_view_inconsistency(latents, view_maps),
        psnr=psnr(latents, target),
        # representative 2-D slice; undefined when the frame is smaller
        # than the filter window
        ssim=(
            ssim(latents[0, 0, 0, 0], target[0, 0, 0, 0])
            if spatial >= 11
            else float("nan")
        ),
        sample_counts={
            "views": latents.shape[0],
            "frames": latents.shape[1] * latents.shape[2],
            "elements": latents.size,
        },
    )
    return IterationRecord(
        iteration=iteration,
        omega=omega,
        metrics=report,
        residual_rms=model.residual_rms,
    )


def run_psf4d(
    scene: SyntheticScene | None = None,
    edit: EditOperator | None = None,
    config: PipelineConfig | None = None,
    *,
    keep_latents: bool = False,
) -> PipelineResult:
    """Full run: observe, edit, refine, and trace the metrics.

    With refine_iterations = 0 the result is the initial edited model
    and a single-record trace. Scene and edit default to the config's
    own constructions; a caller-supplied scene must match the config
    geometry.
    """
    config = PipelineConfig() if config is None else config
    if not isinstance(config, PipelineConfig):
        raise ParameterError(f"config must be a PipelineConfig, got {type(config).__name__}")
    scene = config.scene() if scene is None else scene
    edit = config.edit() if edit is None else edit
    noise_config = config.noise_config()
    expected = (scene.views,) + scene.canonical.shape
    if expected != noise_config.tensor_shape:
        raise ShapeError(
            f"scene renders {expected} but the config describes "
            f"{noise_config.tensor_shape}"
        )
    schedule = config.schedule()
    views = render_views(scene, seed=config.seed)
    target = edit.apply(views)
    edited = initial_edit(
        views,
        edit,
        noise_config,
        schedule,
        oracle_sigma2=config.oracle_sigma2,
        edit_fraction=config.edit_fraction,
        seed=config.seed,
        threads=config.threads,
    )
    model = fit_scene_model(edited, scene.view_maps)
    trace = [_measure(0, None, edited, target, scene.view_maps, model)]
    state = RefinementState(
        iteration=0,
        omega_schedule=config.omegas(),
        latents_prev=model.render(),
        latents_denoised=edited,
        latents_rectified=edited,
        scene_model=model,
    )
    final_latents = edited
    history = [edited]
    while not state.done:
        omega = state.next_omega
        state = refine_step(
            state,
            scene.view_maps,
            noise_config,
            schedule,
            target,
            oracle_sigma2=config.oracle_sigma2,
            edit_fraction=config.edit_fraction,
            seed=config.seed,
            threads=config.threads,
        )
        trace.append(
            _measure(
                state.iteration,
                omega,
                state.latents_rectified,
                target,
                scene.view_maps,
                state.scene_model,
            )
        )
        final_latents = state.latents_rectified
        history.append(state.latents_rectified)
    return PipelineResult(
        config=config,
        model=state.scene_model if state.scene_model is not None else model,
        trace=tuple(trace),
        final_latents=final_latents,
        latents_history=tuple(history) if keep_latents else None,
    )


class PSF4DEditor(BaseEstimator):
    """Estimator-style wrapper: configure once, fit on a scene, inspect.

    fit runs the full loop on the given scene (default scene when
    omitted) and exposes result_, model_, and trace_; predict returns
    the fitted model's view renders.
    """

    def __init__(
        self,
        gamma: float = 0.65,
        lam: float = 0.7,
        refine_iterations: int = 3,
        omega_start: float = DEFAULT_OMEGA_START,
        omega_end: float = DEFAULT_OMEGA_END,
        edit_fraction: float = DEFAULT_EDIT_FRACTION,
        oracle_sigma2: float = 0.04,
        edit_channel: int = 0,
        edit_scale: float = 1.5,
        seed: int = 0,
        threads: int = 1,
    ):
        self.gamma = gamma
        self.lam = lam
        self.refine_iterations = refine_iterations
        self.omega_start = omega_start
        self.omega_end = omega_end
        self.edit_fraction = edit_fraction
        self.oracle_sigma2 = oracle_sigma2
        self.edit_channel = edit_channel
        self.edit_scale = edit_scale
        self.seed = seed
        self.threads = threads

    def _config_for(self, scene: SyntheticScene) -> PipelineConfig:
        n, w, C, H, W = scene.canonical.shape
        return PipelineConfig(
            gamma=self.gamma,
            lam=self.lam,
            views=scene.views,
            windows=n,
            frames_per_window=w,
            channels=C,
            height=H,
            width=W,
            noise_floor=scene.noise_floor,
            edit_fraction=self.edit_fraction,
            refine_iterations=self.refine_iterations,
            omega_start=self.omega_start,
            omega_end=self.omega_end,
            oracle_sigma2=self.oracle_sigma2,
            edit_channel=self.edit_channel,
            edit_scale=self.edit_scale,
            seed=self.seed,
            threads=self.threads,
        )

    def fit(self, scene: SyntheticScene | None = None, y=None) -> "PSF4DEditor":
        scene = default_scene() if scene is None else scene
        result = run_psf4d(scene=scene, config=self._config_for(scene))
        self.result_ = result
        self.model_ = result.model
        self.trace_ = result.trace
        return self

    def predict(self, X=None) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This PSF4DEditor instance is not fitted yet. "
                "Call 'fit' before using it."
            )
        return self.model_.render()
