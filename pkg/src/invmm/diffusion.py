"""DDPM training and DDIM sampling for small pixel-space MLP denoisers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import ndtensor as nt
from .errors import ConfigError, ContractError, TrainingError
from .ndtensor import Tensor

# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; arrays are indexed by ``t - 1`` for ``t in 1..T``."""

    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def ab(self, t):
        """``alpha_bar`` at timestep(s) ``t``; ``t == 0`` maps to 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ContractError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not (isinstance(T, (int, np.integer)) and T >= 2):
        raise ConfigError(f"T_diff must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(float(beta_min), float(beta_max), betas, alphas, alpha_bars)


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ContractError(f"timesteps must lie in [1, {schedule.T}]")
    return t


def _row_coef(values: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Per-row scalars laid out as a constant of ``shape``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return np.full(shape, float(values))
    return np.broadcast_to(values.reshape(-1, *([1] * (len(shape) - 1))), shape).copy()


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`` with scalar or per-row ``t``.

    Returns a Tensor when either input is one (so gradients flow into ``eps``),
    otherwise a numpy array.
    """
    t = _check_t(t, schedule)
    x0_arr = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0_arr.shape != eps_arr.shape:
        raise ContractError(f"x0 {x0_arr.shape} and eps {eps_arr.shape} differ in shape")
    ab = schedule.ab(t)
    a = _row_coef(np.sqrt(ab), x0_arr.shape)
    b = _row_coef(np.sqrt(1.0 - ab), x0_arr.shape)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return nt.add(nt.mul(a, x0), nt.mul(b, eps))
    return a * x0_arr + b * eps_arr


# --------------------------------------------------------------------------- model


def timestep_embedding(T: int, dim: int) -> np.ndarray:
    """Sinusoidal table with one row per ``t in 0..T``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.arange(T + 1, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((T + 1, 1))], axis=1)
    return table


@dataclass(frozen=True)
class DenoiserConfig:
    dim: int
    hidden: int = 256
    depth: int = 3
    temb_dim: int = 32
    n_conditions: int = 0  # |V| including the trailing null id; 0 = unconditional
    cond_dim: int = 16
    cond_positions: int = 1
    output: str = "v"  # "eps": net predicts noise; "v": net predicts velocity

    def __post_init__(self):
        if self.dim < 1 or self.hidden < 1 or self.depth < 1 or self.temb_dim < 1:
            raise ConfigError("denoiser dimensions must be positive")
        if self.n_conditions == 1 or self.n_conditions < 0:
            raise ConfigError("a conditional model needs at least one class plus the null id")
        if self.output not in ("eps", "v"):
            raise ConfigError(f"unknown output parameterization {self.output!r}")
        if not 1 <= self.cond_positions <= 4:
            raise ConfigError("cond_positions must be in 1..4")

    @property
    def conditional(self) -> bool:
        return self.n_conditions > 0

    @property
    def input_dim(self) -> int:
        extra = self.cond_dim * self.cond_positions if self.conditional else 0
        return self.dim + self.temb_dim + extra


class DenoiserModel:
    """MLP noise predictor ``eps_theta(x_t, t, c)``."""

    def __init__(self, config: DenoiserConfig, schedule: NoiseSchedule, params: dict[str, Tensor]):
        self.config = config
        self.schedule = schedule
        self.params = params
        self.temb = timestep_embedding(schedule.T, config.temb_dim)
        ab = schedule.ab(np.arange(schedule.T + 1))
        if config.output == "v":
            self._out_a = np.sqrt(1.0 - ab)
            self._out_b = np.sqrt(ab)
        else:
            self._out_a = np.zeros(schedule.T + 1)
            self._out_b = np.ones(schedule.T + 1)

    @classmethod
    def init(cls, config: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0) -> DenoiserModel:
        rng = np.random.default_rng([seed, 0])
        dims = [config.input_dim] + [config.hidden] * config.depth + [config.dim]
        params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            scale = 1.0 / math.sqrt(a)
            if i == len(dims) - 2:
                scale *= 0.1
            params[f"W{i}"] = Tensor(rng.normal(0.0, scale, size=(a, b)), requires_grad=True)
            params[f"b{i}"] = Tensor(np.zeros(b), requires_grad=True)
        if config.conditional:
            params["cond_table"] = Tensor(rng.normal(0.0, 1.0, size=(config.n_conditions, config.cond_dim)),
                                          requires_grad=True)
        return cls(config, schedule, params)

    @property
    def n_layers(self) -> int:
        return self.config.depth + 1

    @property
    def weights(self) -> list[Tensor]:
        return [self.params[f"W{i}"] for i in range(self.n_layers)]

    @property
    def biases(self) -> list[Tensor]:
        return [self.params[f"b{i}"] for i in range(self.n_layers)]

    @property
    def null_id(self) -> int:
        if not self.config.conditional:
            raise ContractError("unconditional model has no null condition")
        return self.config.n_conditions - 1

    @property
    def cond_table(self) -> np.ndarray:
        if not self.config.conditional:
            raise ContractError("unconditional model has no condition table")
        return self.params["cond_table"].data

    def copy(self) -> DenoiserModel:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return DenoiserModel(self.config, self.schedule, params)

    def frozen(self) -> DenoiserModel:
        """A view whose parameters do not track gradients (for inversion)."""
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        return DenoiserModel(self.config, self.schedule, params)

    # -- condition handling -------------------------------------------------

    def _ids(self, cond, batch: int) -> np.ndarray:
        m = self.config.cond_positions
        ids = np.asarray(cond, dtype=np.int64)
        if ids.ndim == 0:
            ids = np.full((batch, m), int(ids))
        elif ids.ndim == 1:
            ids = ids.reshape(-1, 1) if m == 1 and ids.shape[0] == batch else np.broadcast_to(ids, (batch, m))
        if ids.shape != (batch, m):
            raise ContractError(f"condition ids shape {ids.shape} does not match batch {batch} x {m} positions")
        if np.any(ids < 0) or np.any(ids >= self.config.n_conditions):
            raise ContractError("condition id out of range")
        return ids

    def cond_embedding(self, cond, batch: int):
        """Condition input for ``batch`` rows.

        ``cond`` may be None (null condition), integer ids, or smoothed token
        weights as a Tensor of shape ``(M, V)`` (shared by all rows) or
        ``(batch, M, V)``.  Returns a Tensor so gradients reach smoothed weights.
        """
        cfg = self.config
        m, ec = cfg.cond_positions, cfg.cond_dim
        table = self.params["cond_table"]
        if cond is None:
            cond = self.null_id
        if isinstance(cond, Tensor):
            if cond.shape == (m, cfg.n_conditions):
                e = nt.reshape(nt.matmul(cond, table), (1, m * ec))
                return nt.broadcast_to(e, (batch, m * ec))
            if cond.shape == (batch, m, cfg.n_conditions):
                flat = nt.reshape(cond, (batch * m, cfg.n_conditions))
                return nt.reshape(nt.matmul(flat, table), (batch, m * ec))
            raise ContractError(f"smoothed condition shape {cond.shape} incompatible with |V|={cfg.n_conditions}")
        ids = self._ids(cond, batch)
        rows = table.data[ids.reshape(-1)]
        if table.requires_grad and nt._GRAD_ENABLED:
            onehot = np.zeros((batch * m, cfg.n_conditions))
            onehot[np.arange(batch * m), ids.reshape(-1)] = 1.0
            return nt.reshape(nt.matmul(onehot, table), (batch, m * ec))
        return Tensor(rows.reshape(batch, m * ec))

    def cond_embedding_numpy(self, cond, batch: int) -> np.ndarray:
        cfg = self.config
        m = cfg.cond_positions
        table = self.cond_table
        if cond is None:
            cond = self.null_id
        if isinstance(cond, Tensor):
            cond = cond.data
        arr = np.asarray(cond)
        if arr.dtype.kind == "f" and arr.ndim >= 2 and arr.shape[-1] == cfg.n_conditions:
            w = np.broadcast_to(arr, (batch, m, cfg.n_conditions))
            return (w @ table).reshape(batch, m * cfg.cond_dim)
        ids = self._ids(arr, batch)
        return table[ids.reshape(-1)].reshape(batch, m * cfg.cond_dim)

    # -- prediction ---------------------------------------------------------

    def eps(self, x_t, t, cond=None) -> Tensor:
        """Differentiable noise prediction for a batch ``x_t`` of shape (B, N)."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x_t.ndim != 2 or x_t.shape[1] != self.config.dim:
            raise ContractError(f"x_t must be (B, {self.config.dim}), got {x_t.shape}")
        b = x_t.shape[0]
        t = np.broadcast_to(_check_t(t, self.schedule), (b,))
        parts = [x_t, Tensor(self.temb[t])]
        if self.config.conditional:
            parts.append(self.cond_embedding(cond, b))
        elif cond is not None:
            raise ContractError("unconditional model does not accept a condition")
        net = nt.mlp(nt.concat(parts, axis=1), self.weights, self.biases)
        if self.config.output == "eps":
            return net
        shape = x_t.shape
        return nt.add(nt.mul(_row_coef(self._out_a[t], shape), x_t), nt.mul(_row_coef(self._out_b[t], shape), net))

    def eps_numpy(self, x_t, t, cond=None) -> np.ndarray:
        """Fast no-grad prediction through the compiled kernel."""
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        t = np.broadcast_to(_check_t(t, self.schedule), (b,))
        parts = [x_t, self.temb[t]]
        if self.config.conditional:
            parts.append(self.cond_embedding_numpy(cond, b))
        net = kernels.mlp_apply(np.concatenate(parts, axis=1), [w.data for w in self.weights],
                                [v.data for v in self.biases])
        if self.config.output == "eps":
            return net
        return self._out_a[t][:, None] * x_t + self._out_b[t][:, None] * net


# --------------------------------------------------------------------------- losses


def _as_batch(x) -> np.ndarray | Tensor:
    if isinstance(x, Tensor):
        return x if x.ndim == 2 else nt.reshape(x, (1, -1) if x.ndim == 1 else x.shape)
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _sq_err(model: DenoiserModel, x0, eps, t, cond):
    x0, eps = _as_batch(x0), _as_batch(eps)
    x_t = forward_diffuse(x0, t, eps, model.schedule)
    pred = model.eps(x_t, t, cond)
    return nt.square(nt.sub(eps, pred))


def eps_loss(model: DenoiserModel, x0, eps, t, cond=None) -> Tensor:
    """Element-mean of ``||eps - eps_theta(x_t, t)||^2``."""
    return nt.mean(_sq_err(model, x0, eps, t, cond))


def x0_weights(t, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.ab(_check_t(t, schedule))
    if np.any(ab <= 0.0):
        raise nt.DomainError("alpha_bar_t = 0 makes the x0 reweighting singular")
    return (1.0 - ab) / ab


def x0_loss(model: DenoiserModel, x0, eps, t, cond=None) -> Tensor:
    """Clean-image prediction error, i.e. eps loss reweighted by (1 - ab_t)/ab_t per row."""
    sq = _sq_err(model, x0, eps, t, cond)
    w = x0_weights(t, model.schedule)
    return nt.mean(nt.mul(_row_coef(w, sq.shape), sq))


LOSSES = {"eps": eps_loss, "x0": x0_loss}


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    cond_drop: float = 0.1
    ema: float = 0.99
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 <= self.cond_drop < 1.0:
            raise ConfigError("cond_drop must lie in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs == 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    ema_loss: list[float] = field(default_factory=list)
    epochs_done: int = 0
    optimizer_state: dict | None = None

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss, "ema_loss": self.ema_loss, "epochs_done": self.epochs_done}


def train_denoiser(rows: np.ndarray, schedule: NoiseSchedule, config: TrainConfig,
                   model: DenoiserModel, labels: np.ndarray | None = None,
                   history: TrainHistory | None = None) -> tuple[DenoiserModel, TrainHistory]:
    """Train ``model`` in place on training ``rows`` with the eps objective.

    ``history`` carries the epoch counter and optimizer state, so training can
    resume; per-epoch randomness is keyed on (seed, epoch) and a resumed run
    matches an uninterrupted one.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("training set must be a non-empty (n, N) array")
    if model.config.conditional and labels is None:
        raise ContractError("conditional model needs labels")
    history = history or TrainHistory()
    opt = nt.Adam(model.params, lr=config.lr)
    opt.state = history.optimizer_state
    n = rows.shape[0]
    ema = history.ema_loss[-1] if history.ema_loss else None
    step = 0
    for epoch in range(history.epochs_done, config.epochs):
        rng = np.random.default_rng([config.seed, 1, epoch])
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = rows[idx]
            b = len(idx)
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal(x0.shape)
            cond = None
            if model.config.conditional:
                cond = np.asarray(labels)[idx].copy()
                drop = rng.random(b) < config.cond_drop
                cond[drop] = model.null_id
            opt.zero_grad()
            loss = eps_loss(model, x0, eps, t, cond)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("training loss is not finite", step)
            nt.backward(loss)
            opt.step()
            losses.append(value)
            ema = value if ema is None else config.ema * ema + (1.0 - config.ema) * value
            step += 1
        history.epoch_loss.append(float(np.mean(losses)))
        history.ema_loss.append(float(ema))
        history.epochs_done = epoch + 1
    history.optimizer_state = opt.state
    return model, history


# --------------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplerConfig:
    ddim_steps: int = 50
    eta: float = 0.0
    cfg_scale: float = 1.0
    seed: int = 0

    def validate(self, T: int) -> None:
        if not 1 <= self.ddim_steps <= T:
            raise ConfigError(f"ddim_steps must be in [1, {T}]")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Strictly increasing sub-schedule of [1, T] ending at T."""
    ts = (np.arange(1, steps + 1) * T) // steps
    return ts.astype(np.int64)


def cfg_predict(model: DenoiserModel, x_t, t, cond, cfg_scale: float) -> np.ndarray:
    """Guided noise prediction ``e_null + s * (e_cond - e_null)``."""
    if not model.config.conditional:
        raise ContractError("classifier-free guidance needs a conditional model")
    if cfg_scale < 0:
        raise ContractError("cfg_scale must be >= 0")
    e_null = model.eps_numpy(x_t, t, None)
    e_cond = model.eps_numpy(x_t, t, cond)
    return e_null + cfg_scale * (e_cond - e_null)


def ddim_sample(model: DenoiserModel, noise, config: SamplerConfig, cond=None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Generate images from initial noise ``x_T`` (shape (B, N) or (N,))."""
    sched = model.schedule
    config.validate(sched.T)
    x = np.asarray(noise, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.shape[1] != model.config.dim:
        raise ContractError(f"noise must have {model.config.dim} columns")
    b = x.shape[0]
    ts = ddim_timesteps(sched.T, config.ddim_steps)[::-1]
    prev = np.concatenate([ts[1:], [0]])
    ab_t = sched.ab(ts)
    ab_p = sched.ab(prev)
    sigma = config.eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    noise_seq = None
    if config.eta > 0:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        noise_seq = rng.standard_normal((len(ts), b, x.shape[1]))
    cemb_c = cemb_n = None
    scale = 1.0
    if model.config.conditional:
        cemb_n = model.cond_embedding_numpy(None, b)
        cemb_c = cemb_n if cond is None else model.cond_embedding_numpy(cond, b)
        scale = config.cfg_scale
    out = kernels.ddim_loop(x, [w.data for w in model.weights], [v.data for v in model.biases], model.temb,
                            ts, ab_t, ab_p, sigma, model._out_a[ts], model._out_b[ts], cemb_c, cemb_n, scale,
                            noise_seq)
    return out[0] if single else out


def ddpm_sample(model: DenoiserModel, noise, rng: np.random.Generator, cond=None) -> np.ndarray:
    """Ancestral sampling over all T steps (posterior variance beta-tilde).

    Written independently of the DDIM kernel so it can serve as its oracle.
    """
    sched = model.schedule
    x = np.array(noise, dtype=np.float64, ndmin=2)
    for t in range(sched.T, 0, -1):
        ab = sched.ab(t)
        ab_prev = sched.ab(t - 1)
        beta = sched.betas[t - 1]
        eps = model.eps_numpy(x, t, cond)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 1:
            var = (1.0 - ab_prev) / (1.0 - ab) * beta
            x = mean + math.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = mean
    return x
