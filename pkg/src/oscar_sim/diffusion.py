"""Conditional denoising diffusion on flat vectors.

Images enter in model space ([-1, 1], flattened); a 2-dim "vector mode"
uses the same code paths for cheap statistical checks of the sampler.
The denoiser is a dense MLP over [x_t, sinusoidal time embedding,
condition, null flag]. Conditioning follows the classifier-free recipe:
conditions are dropped at rate p_uncond during training and replaced by
the null token (zero vector plus a raised flag).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    AdamState,
    MlpSpec,
    ParamSet,
    RngStream,
    adam_init,
    adam_step,
    forward_backward,
    init_params,
    mlp_forward,
)

DEFAULT_T_TRAIN = 200
DEFAULT_SAMPLING_STEPS = 50
DEFAULT_GUIDANCE_SCALE = 7.5
DEFAULT_P_UNCOND = 0.1
_X0_CLAMP = 1.1

# canonical range at one thousand steps; shorter schedules scale it up so the
# terminal signal level stays negligible
_CANONICAL_T = 1000
_CANONICAL_BETA_START = 1e-4
_CANONICAL_BETA_END = 0.02
_ALPHA_BAR_TAIL_MAX = 0.05


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    beta_start: float
    beta_end: float
    betas: np.ndarray  # (T,) float64, betas[0] is t=1
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int | np.ndarray):
        return self.alpha_bars[np.asarray(t) - 1]

    def sigma(self, t: int) -> float:
        return float(np.sqrt(self.betas[t - 1]))


def default_beta_range(t_train: int) -> tuple[float, float]:
    scale = _CANONICAL_T / t_train
    return _CANONICAL_BETA_START * scale, _CANONICAL_BETA_END * scale


def make_schedule(
    t_train: int = DEFAULT_T_TRAIN,
    beta_start: float | None = None,
    beta_end: float | None = None,
) -> NoiseSchedule:
    """Linear beta schedule with validated invariants.

    With no explicit range the canonical [1e-4, 0.02] is scaled by 1000/T,
    exact at T=1000. The scaled end crosses 1.0 below T=21, so very short
    schedules need an explicit range.
    """
    if t_train < 1:
        raise DiffusionError(f"t_train must be >= 1, got {t_train}")
    if beta_start is None and beta_end is None:
        beta_start, beta_end = default_beta_range(t_train)
    if beta_start is None or beta_end is None:
        raise DiffusionError("beta_start and beta_end must be given together")
    if not 0.0 < beta_start <= beta_end or beta_end >= 1.0:
        raise DiffusionError(
            f"invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
        )
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if t_train > 1 and not np.all(np.diff(betas) > 0):
        raise DiffusionError("betas must be strictly increasing")
    if alpha_bars[-1] >= _ALPHA_BAR_TAIL_MAX:
        raise DiffusionError(
            f"terminal alpha_bar {alpha_bars[-1]:.4f} >= {_ALPHA_BAR_TAIL_MAX}; "
            "the forward process must end near pure noise (raise beta_end or t_train)"
        )
    return NoiseSchedule(
        t_train=t_train,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def q_sample(
    x0: np.ndarray, t: int | np.ndarray, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if x0.ndim != 2:
        raise DiffusionError("x0 must be (n, data_dim)")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (x0.shape[0],))
    if t_arr.min() < 1 or t_arr.max() > schedule.t_train:
        raise DiffusionError(
            f"timestep out of range [1, {schedule.t_train}]: {int(t_arr.min())}..{int(t_arr.max())}"
        )
    ab = schedule.alpha_bars[t_arr - 1]
    a = np.sqrt(ab).astype(x0.dtype)[:, None]
    b = np.sqrt(1.0 - ab).astype(x0.dtype)[:, None]
    return a * x0 + b * eps


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class DenoiserModel:
    data_dim: int
    cond_dim: int
    time_dim: int
    hidden: tuple[int, ...]
    schedule: NoiseSchedule
    params: ParamSet
    train_steps: int = 0

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(
            in_dim=self.data_dim + self.time_dim + self.cond_dim + 1,
            hidden=self.hidden,
            out_dim=self.data_dim,
            activation="silu",
            head="mse",
        )


def make_denoiser(
    data_dim: int,
    cond_dim: int,
    schedule: NoiseSchedule,
    stream: RngStream,
    hidden: tuple[int, ...] = (512, 512),
    time_dim: int = 32,
) -> DenoiserModel:
    if time_dim % 2 != 0:
        raise DiffusionError("time_dim must be even")
    model = DenoiserModel(
        data_dim=data_dim,
        cond_dim=cond_dim,
        time_dim=time_dim,
        hidden=tuple(hidden),
        schedule=schedule,
        params={},
    )
    return replace(model, params=init_params(model.spec, stream))


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (n, dim) float32."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def build_net_inputs(
    model: DenoiserModel,
    x_t: np.ndarray,
    t: np.ndarray,
    cond: np.ndarray,
    null_mask: np.ndarray,
) -> np.ndarray:
    """Assemble [x_t, time embedding, condition, null flag] rows.

    Rows under null_mask get a zeroed condition and a raised flag; the
    condition itself never reaches the net for those rows.
    """
    n = x_t.shape[0]
    cond = np.where(null_mask[:, None], 0.0, cond).astype(np.float32)
    flag = null_mask.astype(np.float32)[:, None]
    return np.concatenate(
        [x_t.astype(np.float32), time_embedding(t, model.time_dim), cond, flag], axis=1
    )


def denoiser_predict(
    model: DenoiserModel,
    x_t: np.ndarray,
    t: np.ndarray,
    cond: np.ndarray,
    null_mask: np.ndarray,
) -> np.ndarray:
    inputs = build_net_inputs(model, x_t, t, cond, null_mask)
    return mlp_forward(model.spec, model.params, inputs)


def diffusion_train_step(
    model: DenoiserModel,
    state: AdamState,
    x0: np.ndarray,
    cond: np.ndarray,
    stream: RngStream,
    lr: float = 1e-3,
    p_uncond: float = DEFAULT_P_UNCOND,
) -> tuple[DenoiserModel, AdamState, float]:
    """One noise-prediction step: per-element MSE on eps, one Adam update."""
    n = x0.shape[0]
    t = stream.integers(1, model.schedule.t_train + 1, n)
    eps = stream.normal(x0.shape).astype(x0.dtype)
    null_mask = stream.uniform(n) < p_uncond
    x_t = q_sample(x0, t, eps, model.schedule)
    inputs = build_net_inputs(model, x_t, t, cond, null_mask)
    loss, grads = forward_backward(model.spec, model.params, inputs, eps)
    params, state = adam_step(model.params, grads, state, lr=lr)
    return replace(model, params=params, train_steps=model.train_steps + 1), state, loss


def train_denoiser(
    model: DenoiserModel,
    x0: np.ndarray,
    cond: np.ndarray,
    stream: RngStream,
    steps: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    p_uncond: float = DEFAULT_P_UNCOND,
    state: AdamState | None = None,
) -> tuple[DenoiserModel, AdamState, list[float]]:
    """Minibatch training with replacement; batch draws come from the stream."""
    if x0.shape[0] != cond.shape[0]:
        raise DiffusionError("x0 and cond row counts differ")
    if state is None:
        state = adam_init(model.params)
    losses = []
    for _ in range(steps):
        idx = stream.integers(0, x0.shape[0], batch_size)
        model, state, loss = diffusion_train_step(
            model, state, x0[idx], cond[idx], stream, lr=lr, p_uncond=p_uncond
        )
        losses.append(loss)
    return model, state, losses


# piecewise decay: step fractions of the budget and the lr factor for each
_LR_STAGES = ((0.60, 1.0), (0.25, 0.3), (0.15, 0.1))


def train_denoiser_staged(
    model: DenoiserModel,
    x0: np.ndarray,
    cond: np.ndarray,
    stream: RngStream,
    steps: int,
    batch_size: int = 128,
    lr: float = 1e-3,
    p_uncond: float = DEFAULT_P_UNCOND,
) -> tuple[DenoiserModel, list[float]]:
    """Full training run with the stock three-stage learning-rate decay."""
    state = None
    losses: list[float] = []
    done = 0
    for i, (frac, factor) in enumerate(_LR_STAGES):
        n = steps - done if i == len(_LR_STAGES) - 1 else int(steps * frac)
        if n <= 0:
            continue
        model, state, part = train_denoiser(
            model, x0, cond, stream,
            steps=n, batch_size=batch_size, lr=lr * factor,
            p_uncond=p_uncond, state=state,
        )
        losses += part
        done += n
    return model, losses


# ---------------------------------------------------------------------------
# guidance


def cfg_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free mix: (1 + s) * eps_cond - s * eps_uncond."""
    if s < 0:
        raise DiffusionError("guidance scale must be >= 0")
    return (1.0 + s) * eps_cond - s * eps_uncond


def classifier_guided_epsilon(
    eps: np.ndarray, grad_log_prob: np.ndarray, s: float, sigma_t: float
) -> np.ndarray:
    """Classifier steering: eps - s * sigma_t * grad_x log p(y | x_t)."""
    if s < 0:
        raise DiffusionError("guidance scale must be >= 0")
    return eps - s * sigma_t * grad_log_prob


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SampleRequest:
    n_images: int
    condition: np.ndarray | None  # (cond_dim,), or None for unconditional
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE
    n_steps: int = DEFAULT_SAMPLING_STEPS
    seed: int = 0
    rng_label: str = "sample"


def stride_timesteps(t_train: int, n_steps: int) -> list[int]:
    """Evenly strided descending timesteps from t_train down to 1."""
    if not 1 <= n_steps <= t_train:
        raise DiffusionError(f"n_steps must be in [1, {t_train}], got {n_steps}")
    if n_steps == 1:
        return [t_train]
    # half-up rounding keeps the offsets strictly increasing
    ratio = (t_train - 1) / (n_steps - 1)
    return [t_train - int(k * ratio + 0.5) for k in range(n_steps)]


def _ancestral_loop(
    model: DenoiserModel,
    n: int,
    n_steps: int,
    epsilon_fn,
    streams: list[RngStream],
) -> np.ndarray:
    """Reverse updates x_prev = (x_t - beta/sqrt(1-ab_t) * eps) / sqrt(alpha) + sigma z.

    The strided chain keeps the original alpha_bar values at visited steps,
    so each stride's (alpha, beta) pair is alpha_bar_t / alpha_bar_prev; with
    no striding this is exactly the per-step schedule.
    """
    schedule = model.schedule
    ts = stride_timesteps(schedule.t_train, n_steps)
    x = np.stack([s.normal(model.data_dim) for s in streams]).astype(np.float32)
    for i, t in enumerate(ts):
        ab = float(schedule.alpha_bars[t - 1])
        ab_prev = float(schedule.alpha_bars[ts[i + 1] - 1]) if i < len(ts) - 1 else 1.0
        alpha = ab / ab_prev
        beta = 1.0 - alpha
        sigma = float(np.sqrt(beta))
        sq_ab = float(np.sqrt(ab))
        sq_one_minus_ab = float(np.sqrt(1.0 - ab))
        eps_hat = epsilon_fn(x, t, sigma)
        # clamp the implied clean sample, then rebuild a consistent eps
        x0_hat = np.clip((x - sq_one_minus_ab * eps_hat) / sq_ab, -_X0_CLAMP, _X0_CLAMP)
        eps_eff = (x - sq_ab * x0_hat) / sq_one_minus_ab
        mean = (x - beta / sq_one_minus_ab * eps_eff) / float(np.sqrt(alpha))
        if i < len(ts) - 1:
            z = np.stack([s.normal(model.data_dim) for s in streams]).astype(np.float32)
            x = (mean + sigma * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
        if not np.isfinite(x).all():
            raise DiffusionError(f"non-finite sample state at timestep {t}")
    return x


def _check_sampleable(model: DenoiserModel, request: SampleRequest) -> None:
    if model.train_steps == 0:
        raise DiffusionError("denoiser is untrained; train before sampling")
    if request.guidance_scale < 0:
        raise DiffusionError("guidance scale must be >= 0")
    if request.n_images < 1:
        raise DiffusionError("n_images must be positive")
    if request.condition is not None and request.condition.shape != (model.cond_dim,):
        raise DiffusionError(
            f"condition shape {request.condition.shape} does not match cond_dim {model.cond_dim}"
        )


def sample(model: DenoiserModel, request: SampleRequest) -> np.ndarray:
    """Ancestral sampling with classifier-free guidance, (n, data_dim) float32.

    Each image draws from its own stream, so results do not depend on how
    the batch is scheduled.
    """
    _check_sampleable(model, request)
    n = request.n_images
    streams = [
        RngStream(request.seed, f"{request.rng_label}/img{i}") for i in range(n)
    ]
    no_null = np.zeros(n, dtype=bool)
    all_null = np.ones(n, dtype=bool)
    zero_cond = np.zeros((n, model.cond_dim), dtype=np.float32)

    if request.condition is None:
        def epsilon_fn(x, t, sigma):
            t_rows = np.full(n, t, dtype=np.int64)
            return denoiser_predict(model, x, t_rows, zero_cond, all_null)
    else:
        cond_rows = np.tile(request.condition.astype(np.float32), (n, 1))

        def epsilon_fn(x, t, sigma):
            t_rows = np.full(2 * n, t, dtype=np.int64)
            stacked = np.concatenate([x, x])
            conds = np.concatenate([cond_rows, zero_cond])
            mask = np.concatenate([no_null, all_null])
            eps = denoiser_predict(model, stacked, t_rows, conds, mask)
            return cfg_epsilon(eps[:n], eps[n:], request.guidance_scale)

    return _ancestral_loop(model, n, request.n_steps, epsilon_fn, streams)


def sample_classifier_guided(
    model: DenoiserModel, request: SampleRequest, grad_log_prob_fn
) -> np.ndarray:
    """Ancestral sampling steered by an external gradient of log p(y | x_t).

    grad_log_prob_fn(x_t, t) must return a (n, data_dim) array. The base
    prediction is the unconditional head; the condition field of the
    request is ignored here.
    """
    _check_sampleable(model, request)
    n = request.n_images
    streams = [
        RngStream(request.seed, f"{request.rng_label}/img{i}") for i in range(n)
    ]
    all_null = np.ones(n, dtype=bool)
    zero_cond = np.zeros((n, model.cond_dim), dtype=np.float32)

    def epsilon_fn(x, t, sigma):
        t_rows = np.full(n, t, dtype=np.int64)
        eps = denoiser_predict(model, x, t_rows, zero_cond, all_null)
        grad = grad_log_prob_fn(x, t)
        return classifier_guided_epsilon(eps, grad, request.guidance_scale, sigma)

    return _ancestral_loop(model, n, request.n_steps, epsilon_fn, streams)


# ---------------------------------------------------------------------------
# model space conversions


def to_model_space(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] images (n, s, s) to flat [-1, 1] rows."""
    n = pixels.shape[0]
    return (pixels.reshape(n, -1) * 2.0 - 1.0).astype(np.float32)


def from_model_space(flat: np.ndarray, size: int) -> np.ndarray:
    """Flat model-space rows back to [0, 1] images."""
    n = flat.shape[0]
    img = (flat.reshape(n, size, size) + 1.0) / 2.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# OSDM checkpoints

_OSDM_MAGIC = b"OSDM"
_OSDM_VERSION = 1
_KIND_DENOISER = 0
_KIND_CLASSIFIER = 1
_ACTIVATIONS = ("silu", "relu")
_HEADS = ("mse", "softmax_ce")


class OsdmError(ValueError):
    pass


def _pack_arch(spec: MlpSpec) -> bytes:
    parts = [struct.pack("<III", spec.in_dim, spec.out_dim, len(spec.hidden))]
    parts += [struct.pack("<I", h) for h in spec.hidden]
    parts.append(
        struct.pack("<BB", _ACTIVATIONS.index(spec.activation), _HEADS.index(spec.head))
    )
    return b"".join(parts)


def _pack_params(spec: MlpSpec, params: ParamSet) -> bytes:
    parts = []
    for i in range(len(spec.layer_dims())):
        parts.append(np.ascontiguousarray(params[f"w{i}"], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(params[f"b{i}"], dtype="<f4").tobytes())
    return b"".join(parts)


def serialize_denoiser(model: DenoiserModel) -> bytes:
    head = struct.pack("<4sIB", _OSDM_MAGIC, _OSDM_VERSION, _KIND_DENOISER)
    arch = _pack_arch(model.spec)
    extras = struct.pack(
        "<IIIQIdd",
        model.data_dim,
        model.cond_dim,
        model.time_dim,
        model.train_steps,
        model.schedule.t_train,
        model.schedule.beta_start,
        model.schedule.beta_end,
    )
    return head + arch + extras + _pack_params(model.spec, model.params)


def write_denoiser(model: DenoiserModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_denoiser(model))


def serialize_classifier(spec: MlpSpec, params: ParamSet) -> bytes:
    head = struct.pack("<4sIB", _OSDM_MAGIC, _OSDM_VERSION, _KIND_CLASSIFIER)
    return head + _pack_arch(spec) + _pack_params(spec, params)


def write_classifier(spec: MlpSpec, params: ParamSet, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_classifier(spec, params))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise OsdmError(
                f"short read: expected {self.off + size} bytes, got {len(self.blob)}"
            )
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals


def _read_header(blob: bytes) -> tuple[_Reader, int, MlpSpec]:
    if blob[:4] != _OSDM_MAGIC:
        raise OsdmError("not an OSDM file")
    r = _Reader(blob)
    _, version, kind = r.take("<4sIB")
    if version != _OSDM_VERSION:
        raise OsdmError(f"unsupported OSDM version {version}")
    in_dim, out_dim, n_hidden = r.take("<III")
    hidden = tuple(r.take("<I")[0] for _ in range(n_hidden))
    act_id, head_id = r.take("<BB")
    try:
        spec = MlpSpec(in_dim, hidden, out_dim, _ACTIVATIONS[act_id], _HEADS[head_id])
    except IndexError as exc:
        raise OsdmError("unknown activation or head id") from exc
    return r, kind, spec


def _read_params(r: _Reader, spec: MlpSpec) -> ParamSet:
    params: ParamSet = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        need = (fan_in * fan_out + fan_out) * 4
        if r.off + need > len(r.blob):
            raise OsdmError(
                f"parameter block does not match architecture: expected "
                f"{r.off + need} bytes, got {len(r.blob)}"
            )
        w = np.frombuffer(r.blob, dtype="<f4", count=fan_in * fan_out, offset=r.off)
        params[f"w{i}"] = w.reshape(fan_in, fan_out).copy()
        r.off += fan_in * fan_out * 4
        b = np.frombuffer(r.blob, dtype="<f4", count=fan_out, offset=r.off)
        params[f"b{i}"] = b.copy()
        r.off += fan_out * 4
    if r.off != len(r.blob):
        raise OsdmError(
            f"parameter block does not match architecture: expected {r.off} bytes, "
            f"got {len(r.blob)}"
        )
    return params


def read_denoiser(path) -> DenoiserModel:
    with open(path, "rb") as f:
        blob = f.read()
    r, kind, spec = _read_header(blob)
    if kind != _KIND_DENOISER:
        raise OsdmError("checkpoint holds a classifier, expected a denoiser")
    data_dim, cond_dim, time_dim, train_steps, t_train, beta_start, beta_end = r.take(
        "<IIIQIdd"
    )
    if spec.in_dim != data_dim + time_dim + cond_dim + 1 or spec.out_dim != data_dim:
        raise OsdmError("architecture descriptor is inconsistent with denoiser dims")
    params = _read_params(r, spec)
    return DenoiserModel(
        data_dim=data_dim,
        cond_dim=cond_dim,
        time_dim=time_dim,
        hidden=spec.hidden,
        schedule=make_schedule(t_train, beta_start, beta_end),
        params=params,
        train_steps=train_steps,
    )


def read_classifier(path) -> tuple[MlpSpec, ParamSet]:
    with open(path, "rb") as f:
        blob = f.read()
    r, kind, spec = _read_header(blob)
    if kind != _KIND_CLASSIFIER:
        raise OsdmError("checkpoint holds a denoiser, expected a classifier")
    return spec, _read_params(r, spec)
