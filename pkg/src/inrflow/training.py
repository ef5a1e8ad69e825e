"""Point-wise flow-matching training: loss, optimizer step, checkpoints and ablations."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, FormatError, TrainingError
from .fields import FieldSample, stack_samples
from .interpolant import T_MAX, make_interpolant_batch
from .io import read_tensor_blob, write_tensor_blob
from .model import INRFlow, ModelConfig, ema_init, ema_update, load_shadow

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "inrflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    gradient_clip_norm: float = 2.0
    ema_decay: float = 0.999
    batch_size: int = 32
    training_steps: int = 1000
    decode_subsample_M: Optional[int] = None
    cfg_dropout_prob: float = 0.1
    seed: int = 0
    loss_ema_smoothing: float = 0.99
    checkpoint_every: int = 0

    def validate(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, adam_eps > 0")
        for name in ("adam_beta1", "adam_beta2", "ema_decay", "cfg_dropout_prob", "loss_ema_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.gradient_clip_norm <= 0:
            raise ConfigError("gradient_clip_norm must be positive")
        if self.batch_size < 1 or self.training_steps < 0:
            raise ConfigError("batch_size must be >= 1 and training_steps >= 0")
        if self.decode_subsample_M is not None and self.decode_subsample_M < 1:
            raise ConfigError("decode_subsample_M must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    model: INRFlow
    ema: dict
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    last_loss: float = float("nan")
    # bias-corrected running mean of the loss
    loss_ema_raw: float = 0.0
    loss_ema_weight: float = 0.0
    loss_history: list = field(default_factory=list)

    @property
    def ema_loss(self) -> float:
        return self.loss_ema_raw / self.loss_ema_weight if self.loss_ema_weight else float("nan")

    def ema_model(self) -> INRFlow:
        """A copy of the network carrying the EMA weights, for sampling and evaluation."""
        clone = INRFlow(self.model.config, seed=self.model.seed,
                        pseudo_coords=self.model.pseudo_coords.cpu().numpy())
        return load_shadow(clone, self.ema).eval()


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def create_train_state(model_config: ModelConfig, cfg: TrainConfig, data_coords=None) -> TrainState:
    cfg.validate()
    model = INRFlow(model_config, data_coords=data_coords, seed=cfg.seed)
    return TrainState(model, ema_init(model), make_optimizer(model, cfg), np.random.default_rng(cfg.seed))


def cicfm_loss(pred_u, target_u):
    """Mean squared error over every (sample, query, channel) entry."""
    if tuple(pred_u.shape) != tuple(target_u.shape):
        raise ContractError(f"pred {tuple(pred_u.shape)} and target {tuple(target_u.shape)} must match")
    return ((pred_u - target_u) ** 2).mean()


def subsample_queries(coords, values, target_u, m: int, rng: np.random.Generator):
    """Pick ``m`` of the N positions uniformly without replacement, same indices for all three arrays."""
    n = len(coords)
    if not len(values) == len(target_u) == n:
        raise ContractError("coords, values and target_u must share their first dimension")
    if not 1 <= m <= n:
        raise ContractError(f"subsample size must lie in [1, {n}], got {m}")
    idx = rng.choice(n, size=m, replace=False)
    return coords[idx], values[idx], target_u[idx]


def clip_grad_norm(parameters, max_norm: float) -> float:
    """Scale gradients by min(1, max_norm / global_norm); returns the pre-clip norm."""
    grads = [p.grad for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.detach().pow(2).sum() for g in grads)).item()
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / total)
    return total


def train_step(state: TrainState, batch: Sequence[FieldSample], cfg: TrainConfig):
    """One optimizer update. Returns ``(state, loss)``; ``state`` is updated in place."""
    rng, model = state.rng, state.model
    coords, values, conditions = stack_samples(batch)
    ib = make_interpolant_batch(values, rng, T_MAX)
    if conditions is not None and model.config.condition_vocab:
        drop = rng.random(len(conditions)) < cfg.cfg_dropout_prob
        conditions = np.where(drop, -1, conditions)
    elif not model.config.condition_vocab:
        conditions = None

    q_coords, q_values, target = coords, ib.ft_values, ib.target_u
    if cfg.decode_subsample_M is not None and cfg.decode_subsample_M < coords.shape[1]:
        picks = [subsample_queries(c, v, u, cfg.decode_subsample_M, rng)
                 for c, v, u in zip(coords, ib.ft_values, ib.target_u)]
        q_coords, q_values, target = (np.stack(x) for x in zip(*picks))

    model.train()
    pred = model(coords, ib.ft_values, q_coords, q_values, ib.t, conditions)
    loss = cicfm_loss(pred, model.as_tensor(target))
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise TrainingError(f"non-finite loss {loss_value}", step=state.step)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    clip_grad_norm(list(model.parameters()), cfg.gradient_clip_norm)
    state.optimizer.step()
    ema_update(dict(model.named_parameters()), state.ema, cfg.ema_decay)

    state.step += 1
    state.last_loss = loss_value
    beta = cfg.loss_ema_smoothing
    state.loss_ema_raw = beta * state.loss_ema_raw + (1 - beta) * loss_value
    state.loss_ema_weight = beta * state.loss_ema_weight + (1 - beta)
    return state, loss_value


def draw_batch(state: TrainState, dataset: Sequence[FieldSample], batch_size: int) -> list:
    n = len(dataset)
    idx = state.rng.choice(n, size=batch_size, replace=batch_size > n)
    return [dataset[i] for i in idx]


def train(state: TrainState, dataset: Sequence[FieldSample], cfg: TrainConfig, steps: Optional[int] = None,
          log_path=None, checkpoint_path=None, checkpoint_meta: Optional[dict] = None,
          callback: Optional[Callable] = None) -> TrainState:
    """Run ``steps`` (default ``cfg.training_steps``) updates from the current state.

    Appends ``step,loss,ema_loss`` rows to ``log_path`` and writes a
    checkpoint every ``cfg.checkpoint_every`` steps and at the end when
    ``checkpoint_path`` is given.
    """
    if not dataset:
        raise ContractError("empty dataset")
    steps = cfg.training_steps if steps is None else steps
    writer, fh = None, None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss", "ema_loss"])
    try:
        for _ in range(steps):
            batch = draw_batch(state, dataset, cfg.batch_size)
            _, loss = train_step(state, batch, cfg)
            state.loss_history.append(loss)
            if writer is not None:
                writer.writerow([state.step, repr(loss), repr(state.ema_loss)])
            if callback is not None:
                callback(state)
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state, cfg, checkpoint_meta)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, cfg, checkpoint_meta)
    return state


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: Optional[dict] = None) -> None:
    model = state.model
    tensors = {"pseudo_coords": model.pseudo_coords.detach().cpu().numpy()}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.detach().cpu().numpy()
        tensors[f"ema/{name}"] = state.ema[name].cpu().numpy()
        opt_state = state.optimizer.state.get(p, {})
        if opt_state:
            tensors[f"adam_m/{name}"] = opt_state["exp_avg"].cpu().numpy()
            tensors[f"adam_v/{name}"] = opt_state["exp_avg_sq"].cpu().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "model_seed": model.seed,
        "train_config": cfg.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "last_loss": state.last_loss,
        "loss_ema_raw": state.loss_ema_raw,
        "loss_ema_weight": state.loss_ema_weight,
        "extra": extra or {},
    }
    write_tensor_blob(path, tensors, meta)


def load_checkpoint(path, train_config: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig, dict]:
    """Restore ``(state, train_config, extra)``; optimizer hyperparameters come from ``train_config`` if given."""
    tensors, meta = read_tensor_blob(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not an inrflow checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
    model_config = ModelConfig(**meta["model_config"])
    cfg = train_config or TrainConfig(**meta["train_config"])
    model = INRFlow(model_config, seed=meta["model_seed"], pseudo_coords=tensors["pseudo_coords"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"param/{name}"]))
    ema = {name: torch.from_numpy(tensors[f"ema/{name}"]).clone() for name, _ in model.named_parameters()}
    optimizer = make_optimizer(model, cfg)
    for name, p in model.named_parameters():
        if f"adam_m/{name}" in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(meta["step"])),
                "exp_avg": torch.from_numpy(tensors[f"adam_m/{name}"]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam_v/{name}"]).clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(model, ema, optimizer, rng, meta["step"], meta["last_loss"],
                       meta["loss_ema_raw"], meta["loss_ema_weight"])
    return state, cfg, meta.get("extra", {})


# -- ablation harness --------------------------------------------------------------------


def seed_coords(dataset: Sequence[FieldSample], model_config: ModelConfig):
    """Points that seed KMeans++ pseudo-coordinates; ``None`` for every other mode."""
    if model_config.pseudo_coord_mode != "kmeans_pp":
        return None
    src = dataset[0].values if model_config.values_as_coords else dataset[0].coords
    return np.asarray(src)


def evaluate_model(model, reference: Sequence[FieldSample], sampler_cfg=None, num_samples=None, seed=0):
    """Sample from ``model`` at the reference layout and score against ``reference``."""
    from .metrics import evaluate_sets, sample_sets
    from .sampling import SamplerConfig, sample_ode

    sampler_cfg = sampler_cfg or SamplerConfig(steps=20, seed=seed)
    n = num_samples or len(reference)
    coords = reference[0].coords
    traj = sample_ode(model, coords, None, sampler_cfg, num_samples=n)
    final = traj.final
    gen = []
    for k in range(n):
        c = final[k] if model.config.values_as_coords else coords
        gen.append(FieldSample(np.asarray(c), final[k]))
    return evaluate_sets(sample_sets(gen), sample_sets(reference))


def run_ablation(variants: Sequence[dict], dataset: Sequence[FieldSample], base_model: ModelConfig,
                 base_train: TrainConfig, budget: int, reference: Optional[Sequence[FieldSample]] = None,
                 eval_samples: int = 8, sampler_steps: int = 20, use_ema: bool = True) -> list[dict]:
    """Train each variant for ``budget`` steps under one seed and score it.

    Each variant dict may override ``pseudo_coord_mode``, ``num_latents`` and
    any other ModelConfig field, plus ``decode_subsample_M``. Returns one row
    per variant, keyed by (pseudo_coord_mode, num_latents, decode_subsample_M).
    """
    from .sampling import SamplerConfig

    reference = list(reference) if reference is not None else list(dataset[:eval_samples])
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    rows = []
    for variant in variants:
        variant = dict(variant)
        m_over = {k: v for k, v in variant.items() if k in model_fields}
        t_over = {k: v for k, v in variant.items() if k not in model_fields}
        unknown = set(t_over) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
        mcfg = dataclasses.replace(base_model, **m_over)
        tcfg = dataclasses.replace(base_train, **t_over)
        t0 = time.perf_counter()
        state = create_train_state(mcfg, tcfg, seed_coords(dataset, mcfg))
        train(state, dataset, tcfg, steps=budget)
        model = state.ema_model() if use_ema else state.model.eval()
        report = evaluate_model(model, reference[:eval_samples], SamplerConfig(steps=sampler_steps, seed=tcfg.seed),
                                num_samples=min(eval_samples, len(reference)), seed=tcfg.seed)
        rows.append({
            "pseudo_coord_mode": mcfg.pseudo_coord_mode,
            "num_latents": mcfg.num_latents,
            "decode_subsample_M": tcfg.decode_subsample_M,
            "steps": budget,
            "final_loss": state.last_loss,
            "ema_loss": state.ema_loss,
            **{k: v for k, v in report.to_dict().items() if k not in ("n_gen", "n_ref")},
            "seconds": time.perf_counter() - t0,
        })
        log.info("ablation %s L=%s M=%s loss=%.4f", mcfg.pseudo_coord_mode, mcfg.num_latents,
                 tcfg.decode_subsample_M, state.ema_loss)
    return rows


ABLATION_COLUMNS = ("pseudo_coord_mode", "num_latents", "decode_subsample_M", "steps", "final_loss", "ema_loss",
                    "mmd_cd", "mmd_emd", "cov_cd", "cov_emd", "nna_cd", "nna_emd")


def format_ablation_table(rows: Sequence[dict]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        return f"{v:.5f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[c]) for c in ABLATION_COLUMNS] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(ABLATION_COLUMNS)]
    lines = [" | ".join(c.rjust(w) for c, w in zip(ABLATION_COLUMNS, widths))]
    lines.append("-" * len(lines[0]))
    lines += [" | ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
