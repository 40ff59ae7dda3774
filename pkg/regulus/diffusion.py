"""
Denoising diffusion core: noise schedules, closed-form forward noising, a
small time-conditioned denoiser, noise-prediction training, the ancestral
reverse process, and the flat binary checkpoint codec.

Time steps are 1-based throughout: step t uses betas[t - 1].
"""
from __future__ import annotations

import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    COSINE_MAX_BETA,
    COSINE_SCHEDULE_OFFSET,
    FORECASTING_DEFAULTS,
    N_FEATURES,
)
from .errors import (
    CheckpointError,
    EmptyDataset,
    InconsistentShapes,
    InvalidRange,
    NonFiniteLoss,
    ShapeMismatch,
    StepOutOfRange,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
MIN_DATA_SCALE = 1e-3


@contextmanager
def single_thread() -> Iterator[None]:
    """Pin torch to one intra-op thread so reductions run in a fixed order."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


# ---------------------------------------------------------------------------
# Schedules and forward noising
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise StepOutOfRange(f"step {t} outside [1, {self.T}]")

    @classmethod
    def from_betas(cls, kind: str, betas: np.ndarray) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(kind, len(betas), betas, alphas, np.cumprod(alphas))


def build_schedule(
    kind: str = FORECASTING_DEFAULTS['schedule'],
    T: int = FORECASTING_DEFAULTS['T'],
    beta_min: float = FORECASTING_DEFAULTS['beta_min'],
    beta_max: float = FORECASTING_DEFAULTS['beta_max'],
) -> NoiseSchedule:
    """
    Build a linear or cosine beta schedule.

    Cosine betas come from the squared-cosine alpha-bar profile and are then
    clipped into [beta_min, 0.999], so the requested beta range still bounds
    the smallest step.
    """
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRange(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")

    if kind == 'linear':
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == 'cosine':
        s = COSINE_SCHEDULE_OFFSET
        steps = np.arange(T + 1, dtype=np.float64)
        profile = np.cos(((steps / T) + s) / (1.0 + s) * math.pi * 0.5) ** 2
        alpha_bars = profile / profile[0]
        betas = np.clip(1.0 - alpha_bars[1:] / alpha_bars[:-1], beta_min, COSINE_MAX_BETA)
    else:
        raise InvalidRange(f"Unknown schedule kind {kind!r}")
    return NoiseSchedule.from_betas(kind, betas)


def forward_diffuse(x0: np.ndarray, t: int, epsilon: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * epsilon."""
    x0 = np.asarray(x0, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if x0.shape != epsilon.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and epsilon {epsilon.shape} differ")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        scale = math.log(10000) / max(half - 1, 1)
        freqs = torch.exp(torch.arange(half, dtype=DTYPE) * -scale)
        args = t.to(DTYPE)[:, None] * freqs[None, :]
        return torch.cat((args.sin(), args.cos()), dim=-1)


class DenoiserModel(nn.Module):
    """
    Feedforward noise predictor over a flattened (W, d) trajectory.

    The input is preconditioned with the training statistics: x_t is centred
    by sqrt(alpha_bar) * mean and divided by its expected spread
    sqrt(alpha_bar * scale^2 + 1 - alpha_bar). The MLP predicts a residual on
    top of the Gaussian posterior noise estimate for those statistics.
    """

    def __init__(
        self,
        window: int,
        n_features: int = N_FEATURES,
        hidden: int = FORECASTING_DEFAULTS['hidden'],
        time_dim: int = FORECASTING_DEFAULTS['time_embedding'],
    ):
        super().__init__()
        self.window = window
        self.n_features = n_features
        self.hidden = hidden
        self.time_dim = time_dim
        flat = window * n_features

        self.time_embed = SinusoidalTimeEmbedding(time_dim)
        self.fc1 = nn.Linear(flat + time_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, flat)
        self.register_buffer('data_mean', torch.zeros(flat, dtype=DTYPE))
        self.register_buffer('data_scale', torch.ones(flat, dtype=DTYPE))
        self.to(DTYPE)

    @property
    def trajectory_shape(self) -> tuple:
        return (self.window, self.n_features)

    def set_data_statistics(self, data: np.ndarray) -> None:
        flat = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
        self.data_mean.copy_(torch.from_numpy(flat.mean(axis=0)))
        self.data_scale.copy_(torch.from_numpy(np.maximum(flat.std(axis=0), MIN_DATA_SCALE)))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
        batch = x_t.shape[0]
        ab = alpha_bar.to(DTYPE)[:, None]
        spread = (ab * self.data_scale ** 2 + 1.0 - ab).sqrt()
        h = (x_t.reshape(batch, -1) - ab.sqrt() * self.data_mean) / spread
        skip = (1.0 - ab).sqrt() / spread * h
        h = torch.cat([h, self.time_embed(t)], dim=-1)
        h = F.silu(self.fc1(h))
        h = F.silu(self.fc2(h))
        return (skip + self.out(h)).reshape(x_t.shape)

    def weights(self) -> List[torch.Tensor]:
        """Parameters in declaration order followed by the preconditioning buffers."""
        return list(self.parameters()) + [self.data_mean, self.data_scale]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    lr: float = FORECASTING_DEFAULTS['lr']
    batch_size: int = FORECASTING_DEFAULTS['batch_size']
    epochs: int = FORECASTING_DEFAULTS['epochs']
    seed: int = FORECASTING_DEFAULTS['seed']
    optimizer: str = FORECASTING_DEFAULTS['optimizer']
    momentum: float = FORECASTING_DEFAULTS['momentum']
    hidden: int = FORECASTING_DEFAULTS['hidden']
    time_embedding: int = FORECASTING_DEFAULTS['time_embedding']

    @classmethod
    def from_dict(cls, block: Mapping[str, object]) -> "TrainingConfig":
        merged = {**FORECASTING_DEFAULTS, **block}
        return cls(
            lr=float(merged['lr']),
            batch_size=int(merged['batch_size']),
            epochs=int(merged['epochs']),
            seed=int(merged['seed']),
            optimizer=str(merged['optimizer']),
            momentum=float(merged['momentum']),
            hidden=int(merged['hidden']),
            time_embedding=int(merged['time_embedding']),
        )


@dataclass
class TrainingResult:
    model: DenoiserModel
    losses: List[float] = field(default_factory=list)


def _stack(trajectories: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if len(trajectories) == 0:
        raise EmptyDataset("Cannot train on an empty dataset")
    shapes = {np.shape(x) for x in trajectories}
    if len(shapes) > 1:
        raise InconsistentShapes(f"Trajectories have differing shapes: {sorted(shapes)}")
    data = np.stack([np.asarray(x, dtype=np.float64) for x in trajectories])
    if data.ndim != 3:
        raise InconsistentShapes(f"Expected (N, W, d) trajectories, got {data.shape}")
    return data


def _make_optimizer(model: nn.Module, config: TrainingConfig) -> torch.optim.Optimizer:
    if config.optimizer == 'adam':
        return torch.optim.Adam(model.parameters(), lr=config.lr)
    if config.optimizer == 'sgd':
        return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    raise InvalidRange(f"Unknown optimizer {config.optimizer!r}")


def train_denoiser(
    trajectories: Union[np.ndarray, Sequence[np.ndarray]],
    schedule: NoiseSchedule,
    config: Optional[TrainingConfig] = None,
    progress: bool = False,
) -> TrainingResult:
    """Fit the denoiser with the noise-prediction objective over uniformly sampled steps."""
    config = config or TrainingConfig()
    data = _stack(trajectories)
    n, window, n_features = data.shape

    with single_thread():
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            model = DenoiserModel(window, n_features, config.hidden, config.time_embedding)
        model.set_data_statistics(data)
        optimizer = _make_optimizer(model, config)
        generator = torch.Generator().manual_seed(config.seed)
        x_all = torch.from_numpy(data)
        alpha_bars = torch.from_numpy(schedule.alpha_bars)

        losses: List[float] = []
        model.train()
        for epoch in tqdm(range(config.epochs), desc='train', disable=not progress, leave=False):
            order = torch.randperm(n, generator=generator)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x0 = x_all[idx]
                t = torch.randint(1, schedule.T + 1, (len(idx),), generator=generator)
                eps = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
                ab = alpha_bars[t - 1]
                x_t = ab.sqrt()[:, None, None] * x0 + (1.0 - ab).sqrt()[:, None, None] * eps

                loss = F.mse_loss(model(x_t, t, ab), eps)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"Loss became {loss.item()} at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            losses.append(total / n)
            logger.debug(f"[train] epoch {epoch}: loss {losses[-1]:.6f}")
        model.eval()

    logger.info(f"[train] {config.epochs} epochs on {n} trajectories, final loss {losses[-1] if losses else float('nan'):.6f}")
    return TrainingResult(model, losses)


# ---------------------------------------------------------------------------
# Reverse process and scoring
# ---------------------------------------------------------------------------

def _check_shape(model: DenoiserModel, x: np.ndarray) -> None:
    if tuple(x.shape[-2:]) != model.trajectory_shape:
        raise ShapeMismatch(f"Trajectory shape {tuple(x.shape[-2:])} does not match model {model.trajectory_shape}")


def denoise_trajectory(
    model: DenoiserModel,
    x_t: np.ndarray,
    t_start: int,
    schedule: NoiseSchedule,
    noise_seed: int = 0,
) -> np.ndarray:
    """Ancestral reverse process from t_start down to 1; accepts (W, d) or (N, W, d)."""
    schedule.check_step(t_start)
    x_np = np.asarray(x_t, dtype=np.float64)
    _check_shape(model, x_np)
    single = x_np.ndim == 2
    x = torch.from_numpy((x_np[None] if single else x_np).copy())
    generator = torch.Generator().manual_seed(int(noise_seed))
    batch = x.shape[0]

    with single_thread(), torch.no_grad():
        for t in range(int(t_start), 0, -1):
            beta = float(schedule.betas[t - 1])
            alpha = float(schedule.alphas[t - 1])
            ab = float(schedule.alpha_bars[t - 1])
            eps = model(x, torch.full((batch,), t, dtype=torch.long), torch.full((batch,), ab, dtype=DTYPE))
            mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
            if t > 1:
                ab_prev = float(schedule.alpha_bars[t - 2])
                variance = beta * (1.0 - ab_prev) / (1.0 - ab)
                x = mean + math.sqrt(variance) * torch.randn(x.shape, generator=generator, dtype=DTYPE)
            else:
                x = mean
    out = x.numpy()
    return out[0] if single else out


def default_t_star(schedule: NoiseSchedule) -> int:
    return max(1, schedule.T // 20)


def anomaly_scores(
    model: DenoiserModel,
    trajectories: np.ndarray,
    schedule: NoiseSchedule,
    t_star: Optional[int] = None,
    K: int = FORECASTING_DEFAULTS['K'],
    seed: int = 0,
) -> np.ndarray:
    """Mean squared reconstruction error per trajectory, averaged over K noise draws."""
    x = np.asarray(trajectories, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    _check_shape(model, x)
    if K < 1:
        raise InvalidRange(f"K must be >= 1, got {K}")
    t_star = default_t_star(schedule) if t_star is None else int(t_star)
    schedule.check_step(t_star)

    total = np.zeros(len(x), dtype=np.float64)
    for k in range(K):
        rng = np.random.default_rng([seed, k])
        x_t = forward_diffuse(x, t_star, rng.standard_normal(x.shape), schedule)
        recon = denoise_trajectory(model, x_t, t_star, schedule, noise_seed=seed * 1_000_003 + k)
        total += ((recon - x) ** 2).mean(axis=(1, 2))
    return total / K


def anomaly_score(
    model: DenoiserModel,
    trajectory: np.ndarray,
    schedule: NoiseSchedule,
    t_star: Optional[int] = None,
    K: int = FORECASTING_DEFAULTS['K'],
    seed: int = 0,
) -> float:
    return float(anomaly_scores(model, np.asarray(trajectory)[None], schedule, t_star, K, seed)[0])


# ---------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------

_HEADER = struct.Struct('<4sII')


def encode_checkpoint(model: DenoiserModel) -> bytes:
    dims = [model.window, model.n_features, model.time_dim, model.hidden]
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(dims)) + struct.pack(f'<{len(dims)}I', *dims)
    body = b''.join(w.detach().to(DTYPE).numpy().astype('<f8').tobytes() for w in model.weights())
    return header + body


def decode_checkpoint(blob: bytes) -> DenoiserModel:
    if len(blob) < _HEADER.size:
        raise CheckpointError("Checkpoint is truncated")
    magic, version, n_dims = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    offset = _HEADER.size
    if n_dims != 4 or len(blob) < offset + 4 * n_dims:
        raise CheckpointError("Checkpoint header carries unexpected layer dims")
    window, n_features, time_dim, hidden = struct.unpack_from('<4I', blob, offset)
    offset += 4 * n_dims

    model = DenoiserModel(window, n_features, hidden, time_dim)
    weights = model.weights()
    expected = sum(w.numel() for w in weights)
    if len(blob) - offset != expected * 8:
        raise CheckpointError(f"Checkpoint body holds {len(blob) - offset} bytes, expected {expected * 8}")
    values = np.frombuffer(blob, dtype="<f8", offset=offset)
    cursor = 0
    with torch.no_grad():
        for w in weights:
            chunk = values[cursor:cursor + w.numel()].astype(np.float64).reshape(w.shape)
            w.copy_(torch.from_numpy(chunk))
            cursor += w.numel()
    model.eval()
    return model


def save_checkpoint(model: DenoiserModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path: Union[str, Path]) -> DenoiserModel:
    return decode_checkpoint(Path(path).read_bytes())
