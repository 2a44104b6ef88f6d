"""Alternating adversarial training with bit-exact resume.

One optimizer step works on one minibatch: first the discriminator
phase (``disc_steps`` updates of each game's discriminator on detached
samples), then one generator phase (encoder and decoder together, with
discriminator parameters frozen). Three Adam instances keep the groups
independent; a phase touches exactly its own group, which the phase
isolation tests hold as a byte-level guarantee.

Reproducibility rules the layout of this module:

* all randomness flows through named counter streams (init, noise,
  shuffle) whose states are checkpointed, and validation uses a fresh
  stream derived from the seed and epoch number so it carries no state;
* the dataset is regenerated from the config rather than stored, so a
  resumed run sees identical arrays;
* the wall clock is read through ``_now``, which honors the
  ASVAE_FIXED_CLOCK environment variable so determinism tests can
  byte-compare complete metrics files.

The training loop runs with the autodiff validity checks off (it is the
hot path); instead every phase checks its scalar loss and a non-finite
value aborts the run, writing a diagnostic checkpoint next to the
others and raising :class:`~asvae.errors.NumericsError`.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datasets as ds
from . import distributions as dist
from . import networks as net
from . import objectives as obj
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError, ShapeError
from .rng import RngStream

MODES = ("vae", "asvae", "asvae-r", "asvae-g", "ali")
DISC_OBJECTIVES = ("separate", "minmax")
METRIC_COLUMNS = (
    "epoch",
    "total",
    "recon_x",
    "recon_z",
    "adv_f1",
    "adv_f2",
    "val_recon",
    "wall_seconds",
)


def _now() -> float:
    fixed = os.environ.get("ASVAE_FIXED_CLOCK")
    if fixed is not None:
        return float(fixed)
    return time.monotonic()


@dataclass
class TrainConfig:
    """Everything a run depends on; serializes to sorted key=value lines."""

    mode: str = "asvae"
    dataset: str = "mixture2d"
    batch_size: int = 64
    latent_dim: int = 2
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "tanh"
    likelihood: str = "gaussian"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    disc_steps: int = 1
    disc_dropout: float = 0.1
    disc_objective: str = "separate"
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    n_samples: int = 10000
    mixture_k: int = 8
    mixture_separation: float = 2.0
    data_seed: int = 1

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.disc_objective not in DISC_OBJECTIVES:
            raise ConfigError(
                f"disc_objective must be one of {DISC_OBJECTIVES}, got '{self.disc_objective}'"
            )
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        # learning_rate 0 is allowed deliberately: a no-op run is the
        # cheapest end-to-end pipeline check.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.disc_steps < 1:
            raise ConfigError(f"disc_steps must be at least 1, got {self.disc_steps}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.n_samples < 4:
            raise ConfigError(f"n_samples must be at least 4, got {self.n_samples}")
        if self.mixture_k < 1 or self.mixture_separation <= 0:
            raise ConfigError("mixture dataset needs k >= 1 and separation > 0")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.likelihood not in net.LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {net.LIKELIHOODS}")
        if self.activation not in net.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {net.ACTIVATIONS}")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format_value(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def config_to_text(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    return "".join(f"{k}={_format_value(d[k])}\n" for k in sorted(d))


def _parse_value(name: str, raw: str):
    kind = str(_FIELD_TYPES[name])
    try:
        if kind == "int" or kind == "<class 'int'>":
            return int(raw)
        if kind == "float" or kind == "<class 'float'>":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x != "")
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for '{name}': {raw!r}") from e


def config_from_dict(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from string key=value pairs, rejecting unknown keys."""
    cfg_dict = asdict(base) if base is not None else asdict(TrainConfig())
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        cfg_dict[key] = _parse_value(key, raw)
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    return TrainConfig(**cfg_dict)


# ---------------------------------------------------------------------------
# Adam.
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros(p.shape) for k, p in params.items()},
        v={k: np.zeros(p.shape) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns fresh parameter tensors.

    A missing gradient counts as zero (its moments decay). The update is
    p - lr * mhat / (sqrt(vhat) + eps), so the very first step with
    gradient g moves each entry by lr * g / (|g| + eps).
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        step = (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + eps)
        out[name] = Tensor(p.data - lr * step, requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# Parameter groups.
# ---------------------------------------------------------------------------

_GROUPS = {"gen": ("enc", "dec"), "d1": ("d1",), "d2": ("d2",)}


def collect_group(bundle: net.ModelBundle, group: str) -> dict[str, Tensor]:
    nets = bundle.networks()
    out: dict[str, Tensor] = {}
    for prefix in _GROUPS[group]:
        for k, p in nets[prefix].params.items():
            out[f"{prefix}.{k}"] = p
    return out


def assign_group(bundle: net.ModelBundle, updated: dict[str, Tensor]) -> None:
    nets = bundle.networks()
    for name, p in updated.items():
        prefix, key = name.split(".", 1)
        nets[prefix].params[key] = p


def _grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


# ---------------------------------------------------------------------------
# Early stopping.
# ---------------------------------------------------------------------------


def early_stop_update(
    val: float, best: float, epochs_since_improve: int
) -> tuple[float, int, bool]:
    """Strict-improvement rule: returns (new best, new counter, improved)."""
    if val < best:
        return val, 0, True
    return best, epochs_since_improve + 1, False


def should_stop(epochs_since_improve: int, patience: int) -> bool:
    return epochs_since_improve >= patience


# ---------------------------------------------------------------------------
# Training state.
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    bundle: net.ModelBundle
    opt_gen: AdamState
    opt_d1: AdamState
    opt_d2: AdamState
    noise: RngStream
    shuffle: RngStream
    epoch: int = 0
    best_val: float = float("inf")
    epochs_since_improve: int = 0


def build_dataset(config: TrainConfig) -> ds.Dataset:
    if config.dataset == "mixture2d":
        return ds.gen_mixture2d(
            config.mixture_k, config.mixture_separation, config.n_samples, config.data_seed
        )
    if config.dataset == "digits":
        return ds.gen_toy_digits(config.n_samples, config.data_seed)
    if config.dataset.endswith(".atns"):
        return ds.load_dataset_file(config.dataset)
    raise ConfigError(
        f"dataset must be 'mixture2d', 'digits', or a .atns path, got '{config.dataset}'"
    )


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split derived from the seed alone."""
    stream = RngStream(seed).spawn(3)
    perm = stream.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ConfigError(f"validation split swallows the dataset (n={n})")
    return perm[n_val:], perm[:n_val]


def init_train_state(config: TrainConfig, data_dim: int) -> TrainState:
    root = RngStream(config.seed)
    bundle = net.build_bundle(
        data_dim,
        config.latent_dim,
        root.spawn(0),
        hidden=config.hidden,
        activation=config.activation,
        likelihood=config.likelihood,
        disc_dropout=config.disc_dropout,
    )
    return TrainState(
        config=config,
        bundle=bundle,
        opt_gen=init_adam(collect_group(bundle, "gen")),
        opt_d1=init_adam(collect_group(bundle, "d1")),
        opt_d2=init_adam(collect_group(bundle, "d2")),
        noise=root.spawn(1),
        shuffle=root.spawn(2),
    )


def _uses_disc1(mode: str) -> bool:
    return mode in ("asvae", "asvae-r", "ali")


def _uses_disc2(mode: str) -> bool:
    return mode in ("asvae", "asvae-g")


# ---------------------------------------------------------------------------
# Phases.
# ---------------------------------------------------------------------------


def _step_groups(state: TrainState, loss_tensor: Tensor, groups: tuple[str, ...]) -> None:
    """backward once, then update each listed group from its own optimizer."""
    ad.backward(loss_tensor)
    cfg = state.config
    opts = {"gen": state.opt_gen, "d1": state.opt_d1, "d2": state.opt_d2}
    for group in groups:
        params = collect_group(state.bundle, group)
        new_params = adam_step(
            params, _grads_of(params), opts[group],
            cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
        )
        assign_group(state.bundle, new_params)


def _check_finite(value: float, what: str, state: TrainState, run_dir: Path | None) -> None:
    if np.isfinite(value):
        return
    if run_dir is not None:
        save_checkpoint(run_dir / "abort.ckpt", state_to_checkpoint(state))
    raise NumericsError(f"non-finite {what} at epoch {state.epoch + 1}; run aborted")


def disc_phase(state: TrainState, x_a: np.ndarray, x_b: np.ndarray, run_dir: Path | None) -> None:
    """One update of each active discriminator, on detached samples."""
    cfg = state.config
    bundle = state.bundle
    sampler = net.detach_bundle(bundle)
    n = x_a.shape[0]

    if cfg.disc_objective == "minmax" and cfg.mode in ("asvae", "asvae-r", "asvae-g"):
        sides = {"asvae": ("x", "z"), "asvae-r": ("x",), "asvae-g": ("z",)}[cfg.mode]
        loss = obj.asvae_minmax_disc_loss(bundle, Tensor(x_a), state.noise, True, sides)
        _check_finite(loss.item(), "discriminator loss", state, run_dir)
        groups = tuple(g for g, s in (("d1", "x"), ("d2", "z")) if s in sides)
        _step_groups(state, loss, groups)
        return

    if _uses_disc1(cfg.mode):
        real = obj.sample_encoder_joint(sampler, Tensor(x_a), state.noise)
        if cfg.mode == "ali":
            fake = obj.sample_decoder_joint(sampler, n, state.noise)
            value = obj.ali_loss(bundle.disc1, real.detach(), fake.detach(), state.noise, True)
        else:
            fake = obj.sample_product_pq(sampler, n, state.noise)
            value = obj.adv_objective_a1(bundle.disc1, real, fake, state.noise, True)
        loss = -value
        _check_finite(loss.item(), "discriminator loss", state, run_dir)
        _step_groups(state, loss, ("d1",))

    if _uses_disc2(cfg.mode):
        real = obj.sample_decoder_joint(sampler, n, state.noise)
        fake = obj.sample_product_qq(sampler, Tensor(x_a), Tensor(x_b), state.noise)
        value = obj.adv_objective_a2(bundle.disc2, real, fake, state.noise, True)
        loss = -value
        _check_finite(loss.item(), "discriminator loss", state, run_dir)
        _step_groups(state, loss, ("d2",))


def gen_phase(state: TrainState, x_a: np.ndarray, run_dir: Path | None) -> obj.LossReport:
    """One generator update; returns the loss report for logging."""
    cfg = state.config
    bundle = state.bundle
    x = Tensor(x_a)
    if cfg.mode == "vae":
        report = obj.elbo_vae(bundle, x, state.noise)
        loss_tensor = -report.total_tensor
    elif cfg.mode == "asvae":
        report = obj.asvae_generator_loss(bundle, x, state.noise, training=True)
        loss_tensor = report.total_tensor
    elif cfg.mode == "asvae-r":
        report = obj.asvae_r_loss(bundle, x, state.noise, training=True)
        loss_tensor = report.total_tensor
    elif cfg.mode == "asvae-g":
        report = obj.asvae_g_loss(bundle, x_a.shape[0], state.noise, training=True)
        loss_tensor = report.total_tensor
    else:  # ali: minimize the game value through live pairs, frozen disc
        real = obj.sample_encoder_joint(bundle, x, state.noise)
        fake = obj.sample_decoder_joint(bundle, x_a.shape[0], state.noise)
        value = obj.ali_loss(net.detach_mlp(bundle.disc1), real, fake, state.noise, True)
        report = obj.LossReport(total=value.item(), components={}, total_tensor=value)
        loss_tensor = value
    _check_finite(report.total, "generator loss", state, run_dir)
    _step_groups(state, loss_tensor, ("gen",))
    return report


def train_epoch(
    state: TrainState,
    train_x: np.ndarray,
    run_dir: Path | None = None,
) -> dict[str, float]:
    """One pass over the training rows; returns mean logged components.

    Rows are shuffled, then cut into full batches (a short remainder is
    dropped). Batch i pairs with batch i+1 (cyclically) to provide the
    q(x) q(z) game with rows disjoint from the primary batch.
    """
    cfg = state.config
    n = train_x.shape[0]
    b = cfg.batch_size
    n_batches = n // b
    if n_batches < 1:
        raise ConfigError(f"batch_size {b} exceeds training rows {n}")
    if n_batches < 2 and _uses_disc2(cfg.mode):
        raise ConfigError(
            "the q(x) q(z) game needs at least 2 batches per epoch; "
            f"got {n} rows at batch_size {b}"
        )
    perm = state.shuffle.permutation(n)
    sums: dict[str, float] = {}
    count = 0
    with ad.unchecked():
        for i in range(n_batches):
            x_a = train_x[perm[i * b : (i + 1) * b]]
            j = (i + 1) % n_batches
            x_b = train_x[perm[j * b : (j + 1) * b]]
            if cfg.mode != "vae":
                for _ in range(cfg.disc_steps):
                    disc_phase(state, x_a, x_b, run_dir)
            report = gen_phase(state, x_a, run_dir)
            count += 1
            sums["total"] = sums.get("total", 0.0) + report.total
            for k, v in report.components.items():
                sums[k] = sums.get(k, 0.0) + v
    return {k: v / count for k, v in sums.items()}


def validation_metric(
    bundle: net.ModelBundle, mode: str, val_x: np.ndarray, seed: int, epoch: int
) -> float:
    """Held-out reconstruction NLL used for early stopping.

    x side: -mean log p(x | z) with z one posterior draw per row.
    z side: -mean log q(z | x) with z ~ prior and x the decoder's draw.
    vae/asvae/asvae-r are scored on the x side they optimize, asvae-g on
    the z side, ali on the mean of both. The stream is derived from
    (seed, epoch), so validation consumes no training randomness and
    needs no saved state.
    """
    stream = RngStream(seed).spawn(1_000_000 + epoch)
    sampler = net.detach_bundle(bundle)
    with ad.unchecked():
        sides: list[float] = []
        if mode in ("vae", "asvae", "asvae-r", "ali"):
            x = Tensor(val_x)
            pair = obj.sample_encoder_joint(sampler, x, stream)
            d = net.decoder_forward(sampler, pair.z)
            sides.append(-obj.decoder_log_prob(d, x).mean().item())
        if mode in ("asvae-g", "ali"):
            pair = obj.sample_decoder_joint(sampler, val_x.shape[0], stream)
            q = net.encoder_forward(sampler, pair.x)
            sides.append(-dist.gaussian_log_prob(q, pair.z).mean().item())
    return sum(sides) / len(sides)


# ---------------------------------------------------------------------------
# Checkpoint conversion.
# ---------------------------------------------------------------------------


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    params = {k: p.data for k, p in _all_params(state.bundle).items()}
    moments: dict[str, np.ndarray] = {}
    for group, opt in (("gen", state.opt_gen), ("d1", state.opt_d1), ("d2", state.opt_d2)):
        for k, arr in opt.m.items():
            moments[f"{group}.m.{k}"] = arr
        for k, arr in opt.v.items():
            moments[f"{group}.v.{k}"] = arr
    return Checkpoint(
        config={k.split("=", 1)[0]: k.split("=", 1)[1] for k in config_to_text(state.config).splitlines()},
        params=params,
        moments=moments,
        rng={"noise": state.noise.state(), "shuffle": state.shuffle.state()},
        counters={
            "epoch": str(state.epoch),
            "best_val": "%.17g" % state.best_val,
            "epochs_since_improve": str(state.epochs_since_improve),
            "t_gen": str(state.opt_gen.t),
            "t_d1": str(state.opt_d1.t),
            "t_d2": str(state.opt_d2.t),
        },
    )


def _all_params(bundle: net.ModelBundle) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for group in _GROUPS:
        out.update(collect_group(bundle, group))
    return out


def state_from_checkpoint(ckpt: Checkpoint, data_dim: int) -> TrainState:
    """Rebuild a TrainState; every array and stream resumes bit-exactly."""
    config = config_from_dict(ckpt.config)
    state = init_train_state(config, data_dim)
    for name, arr in ckpt.params.items():
        prefix, key = name.split(".", 1)
        state.bundle.networks()[prefix].params[key] = Tensor(arr, requires_grad=True)
    opts = {"gen": state.opt_gen, "d1": state.opt_d1, "d2": state.opt_d2}
    for name, arr in ckpt.moments.items():
        group, kind, key = name.split(".", 2)
        buffer = opts[group].m if kind == "m" else opts[group].v
        buffer[key] = arr.copy()
    state.noise = RngStream(*ckpt.rng["noise"])
    state.shuffle = RngStream(*ckpt.rng["shuffle"])
    state.epoch = int(ckpt.counters["epoch"])
    state.best_val = float(ckpt.counters["best_val"])
    state.epochs_since_improve = int(ckpt.counters["epochs_since_improve"])
    state.opt_gen.t = int(ckpt.counters["t_gen"])
    state.opt_d1.t = int(ckpt.counters["t_d1"])
    state.opt_d2.t = int(ckpt.counters["t_d2"])
    return state


# ---------------------------------------------------------------------------
# The full run.
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict[str, float]]
    stopped_early: bool
    best_epoch: int


def _metrics_row(epoch: int, epoch_metrics: dict[str, float], val: float, wall: float) -> str:
    cells = [str(epoch)]
    for col in METRIC_COLUMNS[1:-2]:
        cells.append("%.17g" % epoch_metrics[col] if col in epoch_metrics else "")
    cells.append("%.17g" % val)
    cells.append("%.17g" % wall)
    return ",".join(cells)


def run_training(
    config: TrainConfig,
    run_dir: str | Path | None = None,
    resume_state: TrainState | None = None,
    log=None,
) -> TrainResult:
    """Build the configured dataset and train on it; see train_on_arrays."""
    dataset = build_dataset(config)
    return train_on_arrays(
        config, dataset.features, run_dir=run_dir, resume_state=resume_state, log=log
    )


def train_on_arrays(
    config: TrainConfig,
    features: np.ndarray,
    run_dir: str | Path | None = None,
    resume_state: TrainState | None = None,
    log=None,
) -> TrainResult:
    """Train to max_epochs or early stop, logging one metrics row per epoch.

    With a run directory this writes ``config.resolved.txt``,
    ``metrics.csv`` (header plus one row per completed epoch),
    ``last.ckpt`` after every epoch, and ``best.ckpt`` whenever the
    validation metric improves. Without one it trains purely in memory.
    When resuming, rows for already-completed epochs are not rewritten.
    """
    if features.ndim != 2:
        raise ShapeError(f"features must be [n, d], got {features.shape}")
    train_idx, val_idx = split_indices(features.shape[0], config.val_fraction, config.seed)
    train_x = features[train_idx]
    val_x = features[val_idx]

    state = resume_state if resume_state is not None else init_train_state(
        config, features.shape[1]
    )
    state.config = config

    out_dir: Path | None = None
    metrics_path = None
    if run_dir is not None:
        out_dir = Path(run_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.txt").write_text(config_to_text(config))
        metrics_path = out_dir / "metrics.csv"
        if resume_state is None or not metrics_path.exists():
            metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")

    rows: list[dict[str, float]] = []
    stopped_early = False
    best_epoch = state.epoch if state.best_val < float("inf") else 0
    while state.epoch < config.max_epochs:
        started = _now()
        epoch_metrics = train_epoch(state, train_x, out_dir)
        val = validation_metric(state.bundle, config.mode, val_x, config.seed, state.epoch)
        _check_finite(val, "validation metric", state, out_dir)
        wall = _now() - started
        state.epoch += 1

        state.best_val, state.epochs_since_improve, improved = early_stop_update(
            val, state.best_val, state.epochs_since_improve
        )
        if improved:
            best_epoch = state.epoch
        record = dict(epoch_metrics)
        record["epoch"] = state.epoch
        record["val_recon"] = val
        record["wall_seconds"] = wall
        rows.append(record)
        if log is not None:
            log(f"epoch {state.epoch}: total={epoch_metrics.get('total', float('nan')):.4f} "
                f"val={val:.4f}")

        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(_metrics_row(state.epoch, epoch_metrics, val, wall) + "\n")
            save_checkpoint(out_dir / "last.ckpt", state_to_checkpoint(state))
            if improved:
                save_checkpoint(out_dir / "best.ckpt", state_to_checkpoint(state))

        if should_stop(state.epochs_since_improve, config.patience):
            stopped_early = True
            break

    return TrainResult(
        state=state, metrics=rows, stopped_early=stopped_early, best_epoch=best_epoch
    )
