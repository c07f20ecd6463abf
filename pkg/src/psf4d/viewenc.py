"""Camera-conditioned position encoding and the element-mean squared loss.

A camera pose enters as its flattened 4x4 world-to-camera matrix (16
values). A two-layer perceptron maps it to an embedding the same width
as the sinusoidal time embedding, and conditioning adds the two. All
gradients here are written out by hand; tests hold them against central
finite differences, so the layout of the backward pass is part of the
contract.

Widths default to 64/64 with a smooth self-gated nonlinearity
(x * sigmoid(x), derivative bounded by 1.1); both widths, the
activation, and the fan-in-scaled uniform initialization are
configurable.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .exceptions import DivergenceError, FormatError, ParameterError, ShapeError
from .rng import ROLE_ENCODER_INIT, RngState, stream_id
from .tensor import load_tensor, save_tensor
from .validation import (
    check_array,
    check_choice,
    check_finite_float,
    check_nonnegative_int,
    check_positive_int,
)

POSE_WIDTH = 16


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _identity(x):
    return x


def _identity_grad(x):
    return np.ones_like(x)


# activation tag -> (function, derivative, slope bound)
ACTIVATIONS = {
    "silu": (_silu, _silu_grad, 1.1),
    "identity": (_identity, _identity_grad, 1.0),
}


@dataclasses.dataclass(frozen=True)
class CameraPose:
    """Flattened row-major 4x4 world-to-camera matrix."""

    extrinsic: np.ndarray

    def __post_init__(self):
        ext = check_array(self.extrinsic, "extrinsic", shape=(POSE_WIDTH,))
        object.__setattr__(self, "extrinsic", ext)

    @classmethod
    def from_rotation_translation(cls, rotation, translation) -> "CameraPose":
        """Build a rigid pose; the rotation must be orthonormal with
        determinant +1 (checked to 1e-9)."""
        rot = check_array(rotation, "rotation", shape=(3, 3))
        trans = check_array(translation, "translation", shape=(3,))
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ParameterError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(rot)), 1.0, abs_tol=1e-9):
            raise ParameterError("rotation determinant must be +1")
        matrix = np.eye(4)
        matrix[:3, :3] = rot
        matrix[:3, 3] = trans
        return cls(matrix.reshape(-1))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(4).reshape(-1))

    @property
    def matrix(self) -> np.ndarray:
        return self.extrinsic.reshape(4, 4)


@dataclasses.dataclass
class ViewEncoder:
    """Two-layer perceptron from pose values to an embedding residual."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "silu"
    init_seed: int | None = None

    def __post_init__(self):
        self.w1 = check_array(self.w1, "w1", ndim=2)
        if self.w1.shape[0] != POSE_WIDTH:
            raise ShapeError(
                f"w1 must map {POSE_WIDTH} pose values, got shape {self.w1.shape}"
            )
        hidden = self.w1.shape[1]
        self.b1 = check_array(self.b1, "b1", shape=(hidden,))
        self.w2 = check_array(self.w2, "w2", shape=(hidden, None))
        self.b2 = check_array(self.b2, "b2", shape=(self.w2.shape[1],))
        check_choice(self.activation, "activation", ACTIVATIONS)

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[1]

    @property
    def embed_width(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "ViewEncoder":
        return ViewEncoder(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            activation=self.activation, init_seed=self.init_seed,
        )


def new_encoder(
    seed: int = 0,
    hidden_width: int = 64,
    embed_width: int = 64,
    activation: str = "silu",
) -> ViewEncoder:
    """Fresh encoder with fan-in-scaled uniform parameters.

    Each layer's weights and bias draw from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)), on a dedicated counter-based stream so encoder
    initialization never aliases noise sampling.
    """
    hidden_width = check_positive_int(hidden_width, "hidden_width")
    embed_width = check_positive_int(embed_width, "embed_width")
    check_choice(activation, "activation", ACTIVATIONS)
    state = RngState(seed, stream_id(ROLE_ENCODER_INIT, 0, 0))
    gen = state.generator

    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        w = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        b = gen.uniform(-bound, bound, size=fan_out)
        return w, b

    w1, b1 = layer(POSE_WIDTH, hidden_width)
    w2, b2 = layer(hidden_width, embed_width)
    return ViewEncoder(w1, b1, w2, b2, activation=activation, init_seed=int(seed))


def zero_encoder(
    hidden_width: int = 64, embed_width: int = 64, activation: str = "silu"
) -> ViewEncoder:
    return ViewEncoder(
        np.zeros((POSE_WIDTH, hidden_width)),
        np.zeros(hidden_width),
        np.zeros((hidden_width, embed_width)),
        np.zeros(embed_width),
        activation=activation,
    )


def _pose_values(pose) -> np.ndarray:
    if isinstance(pose, CameraPose):
        return pose.extrinsic
    return check_array(pose, "pose", shape=(POSE_WIDTH,))


def encode_view(encoder: ViewEncoder, pose) -> np.ndarray:
    """Embedding residual for one pose: layer2(act(layer1(pose)))."""
    x = _pose_values(pose)
    act, _, _ = ACTIVATIONS[encoder.activation]
    return act(x @ encoder.w1 + encoder.b1) @ encoder.w2 + encoder.b2


def encode_views(encoder: ViewEncoder, poses: np.ndarray) -> np.ndarray:
    """Batched ``encode_view`` over rows of a (n, 16) array."""
    x = check_array(poses, "poses", shape=(None, POSE_WIDTH))
    act, _, _ = ACTIVATIONS[encoder.activation]
    return act(x @ encoder.w1 + encoder.b1) @ encoder.w2 + encoder.b2


def grad_output_sum(encoder: ViewEncoder, pose) -> dict[str, np.ndarray]:
    """Gradients of sum(encode_view) with respect to every parameter.

    The scalarized output makes every parameter's influence observable
    in one backward pass, which is what the finite-difference harness
    checks against.
    """
    x = _pose_values(pose)
    act, act_grad, _ = ACTIVATIONS[encoder.activation]
    pre = x @ encoder.w1 + encoder.b1
    hidden = act(pre)
    d_b2 = np.ones(encoder.embed_width)
    d_w2 = np.outer(hidden, d_b2)
    d_hidden = encoder.w2 @ d_b2
    d_pre = d_hidden * act_grad(pre)
    return {
        "w1": np.outer(x, d_pre),
        "b1": d_pre,
        "w2": d_w2,
        "b2": d_b2,
    }


def time_embedding(t, width: int = 64, base: float = 1e4) -> np.ndarray:
    """Sinusoidal step embedding with geometric frequency spacing.

    Even slots carry sin(t / base^(i/half)), odd slots the matching
    cosine; every value lies in [-1, 1].
    """
    t = check_finite_float(t, "t")
    width = check_positive_int(width, "width")
    if width % 2:
        raise ParameterError(f"width={width} must be even")
    base = float(base)
    if not base > 1.0:
        raise ParameterError(f"base={base} must exceed 1")
    half = width // 2
    freqs = base ** (-np.arange(half) / half)
    angles = t * freqs
    out = np.empty(width)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def combined_embedding(
    encoder: ViewEncoder, pose, t, width: int | None = None
) -> np.ndarray:
    """Time embedding plus the pose's embedding residual."""
    if width is None:
        width = encoder.embed_width
    elif width != encoder.embed_width:
        raise ShapeError(
            f"width={width} does not match encoder output {encoder.embed_width}"
        )
    return time_embedding(t, width) + encode_view(encoder, pose)


def diffusion_loss(predicted_eps, target_eps) -> float:
    """Squared error averaged over every element."""
    pred = check_array(predicted_eps, "predicted_eps")
    target = check_array(target_eps, "target_eps", shape=pred.shape)
    if pred.size == 0:
        raise ShapeError("loss of an empty tensor is undefined")
    diff = pred - target
    return float(np.mean(diff * diff))


def diffusion_loss_grad(predicted_eps, target_eps) -> np.ndarray:
    """Gradient of ``diffusion_loss`` in its first argument:
    2 (predicted - target) / element count."""
    pred = check_array(predicted_eps, "predicted_eps")
    target = check_array(target_eps, "target_eps", shape=pred.shape)
    if pred.size == 0:
        raise ShapeError("loss of an empty tensor is undefined")
    return 2.0 * (pred - target) / pred.size


def train_encoder_toy(
    encoder: ViewEncoder,
    poses: np.ndarray,
    targets: np.ndarray,
    steps: int,
    lr: float,
) -> tuple[ViewEncoder, list[float]]:
    """Full-batch gradient descent on the element-mean squared error.

    Returns a trained copy and the loss value before each update plus
    the final loss (steps + 1 entries). The input encoder is never
    mutated. A non-finite loss raises with the step index where the
    run diverged.
    """
    steps = check_nonnegative_int(steps, "steps")
    lr = check_finite_float(lr, "lr")
    if lr < 0:
        raise ParameterError(f"lr={lr} must be >= 0")
    x = check_array(poses, "poses", shape=(None, POSE_WIDTH))
    if x.shape[0] == 0:
        raise ShapeError("training set is empty")
    t = check_array(targets, "targets", shape=(x.shape[0], None))
    model = encoder.copy()
    if t.shape[1] != model.embed_width:
        raise ShapeError(
            f"targets have width {t.shape[1]}, encoder emits {model.embed_width}"
        )
    act, act_grad, _ = ACTIVATIONS[model.activation]
    scale = x.shape[0] * model.embed_width
    losses = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            pre = x @ model.w1 + model.b1
            hidden = act(pre)
            out = hidden @ model.w2 + model.b2
            diff = out - t
            loss = float(np.sum(diff * diff)) / scale
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at step {step}")
            losses.append(loss)
            if step == steps:
                break
            g_out = 2.0 * diff / scale
            g_hidden = g_out @ model.w2.T
            g_pre = g_hidden * act_grad(pre)
            model.w2 -= lr * (hidden.T @ g_out)
            model.b2 -= lr * g_out.sum(axis=0)
            model.w1 -= lr * (x.T @ g_pre)
            model.b1 -= lr * g_pre.sum(axis=0)
    return model, losses


def save_encoder(encoder: ViewEncoder, prefix) -> None:
    """Write the four parameter tensors plus a JSON manifest."""
    prefix = os.fspath(prefix)
    for name in ("w1", "b1", "w2", "b2"):
        save_tensor(f"{prefix}.{name}.psf4d", getattr(encoder, name))
    manifest = {
        "activation": encoder.activation,
        "embed_width": encoder.embed_width,
        "hidden_width": encoder.hidden_width,
        "init_seed": encoder.init_seed,
        "pose_width": POSE_WIDTH,
    }
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_encoder(prefix) -> ViewEncoder:
    prefix = os.fspath(prefix)
    with open(f"{prefix}.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        activation = manifest["activation"]
        hidden = manifest["hidden_width"]
        embed = manifest["embed_width"]
    except KeyError as exc:
        raise FormatError(f"encoder manifest is missing key {exc}")
    parts = {
        name: load_tensor(f"{prefix}.{name}.psf4d") for name in ("w1", "b1", "w2", "b2")
    }
    encoder = ViewEncoder(
        parts["w1"], parts["b1"], parts["w2"], parts["b2"],
        activation=activation, init_seed=manifest.get("init_seed"),
    )
    if encoder.hidden_width != hidden or encoder.embed_width != embed:
        raise FormatError("encoder manifest widths disagree with the tensors")
    return encoder


class ViewPositionEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade: fit trains the perceptron on (pose, embedding)
    pairs, transform maps poses to embedding residuals."""

    def __init__(
        self,
        hidden_width: int = 64,
        embed_width: int = 64,
        activation: str = "silu",
        steps: int = 2000,
        lr: float = 0.5,
        seed: int = 0,
    ):
        self.hidden_width = hidden_width
        self.embed_width = embed_width
        self.activation = activation
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        start = new_encoder(
            seed=self.seed,
            hidden_width=self.hidden_width,
            embed_width=self.embed_width,
            activation=self.activation,
        )
        self.encoder_, self.losses_ = train_encoder_toy(
            start, X, y, steps=self.steps, lr=self.lr
        )
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "encoder_"):
            raise NotFittedError("fit this encoder before calling transform")
        return encode_views(self.encoder_, X)
