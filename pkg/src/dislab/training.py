"""Optimization loops for DSED and FEN, with metrics streaming and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, TextIO

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .datasets.loader import TripletArray
from .errors import ConfigurationError, NumericDomainError, TrainingAborted
from .losses import (
    Parity,
    dsed_loss,
    fen_total_loss,
    kl_divergence,
    mse_loss,
    one_hot,
    style_cross_entropy,
)
from .models import DSEDModel, FENModel, ModelConfig, build_model, dsed_forward, fen_forward

log = logging.getLogger(__name__)

# TrainConfig fields that may change between a checkpoint and its resumption
RESUMABLE_FIELDS = ("epochs", "checkpoint_every", "log_wall_time")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    beta: float = 4.0
    gamma: float = 100.0
    learning_rate: float = 1e-3
    head_learning_rate: float | None = None
    batch_triplets: int = 12
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    log_wall_time: bool = False
    # start decoder outputs at the training-set pixel mean (per style for DSED)
    output_bias_from_data: bool = True

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.beta < 0 or not math.isfinite(self.beta):
            raise ConfigurationError(f"beta must be a finite value >= 0, got {self.beta}")
        if self.gamma < 0 or not math.isfinite(self.gamma):
            raise ConfigurationError(f"gamma must be a finite value >= 0, got {self.gamma}")
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.head_learning_rate is not None and not self.head_learning_rate >= 0:
            raise ConfigurationError("head_learning_rate must be >= 0")
        if self.batch_triplets < 1:
            raise ConfigurationError(f"batch_triplets must be >= 1, got {self.batch_triplets}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.optimizer != "adam":
            raise ConfigurationError(f"only the 'adam' optimizer is supported, got {self.optimizer!r}")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")

    @property
    def variant(self) -> str:
        return self.model.variant

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    parity: str
    reconstruction: float
    kl: float
    friend_ce: float
    enemy_ce: float
    friend_acc: float
    enemy_acc: float
    wall_ms: int

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.reconstruction, self.kl, self.friend_ce, self.enemy_ce))


def total_loss(record: MetricsRecord, config: TrainConfig) -> float:
    """Encoder objective implied by a record (the adversarial term follows parity)."""
    base = record.reconstruction + config.beta * record.kl
    if record.parity == Parity.EVEN.value:
        return base - config.gamma * record.enemy_ce
    if record.parity == Parity.ODD.value:
        return base + config.gamma * record.friend_ce
    return base


class JsonlSink:
    """Append-only JSON-lines metrics writer."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: TextIO = open(self.path, "a" if append else "w")

    def __call__(self, record: MetricsRecord) -> None:
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    return [MetricsRecord.from_json(line) for line in Path(path).read_text().splitlines() if line]


@dataclass
class TrainState:
    config: TrainConfig
    style_names: list[str]
    model: nn.Module
    optimizer: torch.optim.Optimizer
    head_optimizer: torch.optim.Optimizer | None
    generator: torch.Generator
    iteration: int = 0
    epoch: int = 0


def _adam(params, lr, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=config.adam_betas, eps=config.adam_eps)


def _named_groups(model: nn.Module) -> dict[str, list[tuple[str, nn.Parameter]]]:
    named = list(model.named_parameters())
    if isinstance(model, FENModel):
        heads = [(n, p) for n, p in named if n.startswith(("friend.", "enemy."))]
        main = [(n, p) for n, p in named if not n.startswith(("friend.", "enemy."))]
        return {"main": main, "heads": heads}
    return {"main": named}


def init_output_biases(model: nn.Module, data: TripletArray) -> None:
    """Per-channel training pixel means: one per style decoder for DSED, pooled for FEN."""
    means = data.images.double().mean(dim=(0, 3, 4)).float()  # (K, C)
    if isinstance(model, DSEDModel):
        for dec, m in zip(model.decoders, means):
            dec.init_output_bias(m)
    else:
        model.decoder.init_output_bias(means.mean(dim=0))


def init_state(config: TrainConfig, style_names: list[str], data: TripletArray | None = None) -> TrainState:
    """Fresh model and optimizers; ``data`` enables the data-mean output bias."""
    if len(style_names) != config.model.num_styles:
        raise ConfigurationError(
            f"dataset has {len(style_names)} styles but model expects {config.model.num_styles}"
        )
    model = build_model(config.model, style_names, config.seed)
    if data is not None and config.output_bias_from_data:
        init_output_biases(model, data)
    groups = _named_groups(model)
    opt = _adam([p for _, p in groups["main"]], config.learning_rate, config)
    head_opt = None
    if "heads" in groups:
        head_lr = config.learning_rate if config.head_learning_rate is None else config.head_learning_rate
        head_opt = _adam([p for _, p in groups["heads"]], head_lr, config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(config, list(style_names), model, opt, head_opt, gen)


def _finite_or_abort(loss: torch.Tensor, record: MetricsRecord) -> None:
    if not torch.isfinite(loss):
        raise TrainingAborted(f"non-finite loss at epoch {record.epoch}: {record.to_json()}", record)


def _nan_record(epoch: int, parity: str) -> MetricsRecord:
    nan = float("nan")
    return MetricsRecord(epoch, parity, nan, nan, nan, nan, nan, nan, 0)


def train_step_dsed(images: torch.Tensor, state: TrainState) -> MetricsRecord:
    """One Adam step on all K*K encoder->decoder paths of a ``(B, K, C, H, W)`` batch.

    ``reconstruction`` sums the K*K path losses and ``kl`` sums over the K
    encoders, so the objective is ``reconstruction + beta * kl``.
    """
    model: DSEDModel = state.model
    cfg = state.config
    t0 = time.perf_counter()
    out = dsed_forward(images, state.style_names, model, state.generator)
    k = len(model.style_names)
    rec = sum(mse_loss(out.recon[s][t], images[:, t]) for s in range(k) for t in range(k))
    kl = sum(kl_divergence(g) for g in out.params)
    total = rec + cfg.beta * kl
    record = MetricsRecord(state.epoch, "n/a", rec.item(), kl.item(), 0.0, 0.0, 0.0, 0.0, 0)
    _finite_or_abort(total, record)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.iteration += 1
    if cfg.log_wall_time:
        record.wall_ms = int((time.perf_counter() - t0) * 1000)
    return record


def update_heads(model: FENModel, optimizer: torch.optim.Optimizer, content: torch.Tensor,
                 style: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Train Friend and Enemy on their own cross-entropy over detached latents."""
    friend_ce = style_cross_entropy(model.friend(style.detach()), target)
    enemy_ce = style_cross_entropy(model.enemy(content.detach()), target)
    optimizer.zero_grad(set_to_none=True)
    (friend_ce + enemy_ce).backward()
    optimizer.step()
    return friend_ce.detach(), enemy_ce.detach()


def train_step_fen(images: torch.Tensor, state: TrainState, iteration: int | None = None) -> MetricsRecord:
    """One FEN iteration on a ``(B, K, C, H, W)`` batch.

    The encoder/decoder step and the head step are computed from the same
    pre-update parameters; heads never see encoder gradients and the
    encoder/decoder never see head-training gradients.
    """
    model: FENModel = state.model
    cfg = state.config
    t0 = time.perf_counter()
    it = state.iteration if iteration is None else iteration
    parity = Parity.of(it)
    n, k = images.shape[:2]
    x = images.reshape(n * k, *images.shape[2:])
    labels = torch.arange(k).repeat(n)
    target = one_hot(labels, k)

    out = fen_forward(x, labels, model, state.generator)
    probe = out.enemy_probs if parity is Parity.EVEN else out.friend_probs
    loss = fen_total_loss(out.recon, x, out.params, probe, target, parity, cfg.beta, cfg.gamma)
    with torch.no_grad():
        friend_acc = float((out.friend_probs.argmax(1) == labels).float().mean())
        enemy_acc = float((out.enemy_probs.argmax(1) == labels).float().mean())
        friend_ce = float(style_cross_entropy(out.friend_probs, target))
        enemy_ce = float(style_cross_entropy(out.enemy_probs, target))
    record = MetricsRecord(state.epoch, parity.value, loss.reconstruction.item(), loss.kl.item(),
                           friend_ce, enemy_ce, friend_acc, enemy_acc, 0)
    _finite_or_abort(loss.total, record)

    state.optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    content = out.code.sample[:, :cfg.model.content_dim]
    style = out.code.sample[:, cfg.model.content_dim:]
    update_heads(model, state.head_optimizer, content, style, target)
    state.optimizer.step()
    state.iteration += 1
    if cfg.log_wall_time:
        record.wall_ms = int((time.perf_counter() - t0) * 1000)
    return record


def epoch_batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# ---------------------------------------------------------------- checkpoints

def _state_tensors(state: TrainState) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {f"model/{n}": p.detach() for n, p in state.model.named_parameters()}
    opt_meta = {}
    groups = _named_groups(state.model)
    for opt_name, opt in (("main", state.optimizer), ("heads", state.head_optimizer)):
        if opt is None:
            continue
        names = [n for n, _ in groups[opt_name]]
        steps = {}
        for idx, st in opt.state_dict()["state"].items():
            pname = names[idx]
            steps[pname] = float(st["step"])
            tensors[f"optim/{opt_name}/{pname}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{opt_name}/{pname}/exp_avg_sq"] = st["exp_avg_sq"]
        opt_meta[opt_name] = {"steps": steps}
    return tensors, opt_meta


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    tensors, opt_meta = _state_tensors(state)
    meta = {
        "config": state.config.to_dict(),
        "style_names": state.style_names,
        "iteration": state.iteration,
        "epoch": state.epoch,
        "rng_state": state.generator.get_state().numpy().tobytes().hex(),
        "optimizers": opt_meta,
    }
    return ckpt.write_checkpoint_dir(path, meta, tensors)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> TrainState:
    meta, tensors = ckpt.read_checkpoint_dir(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as e:
        raise ckpt.IntegrityError(f"bad config block ({e})", ckpt.METADATA) from e
    if expected is not None and expected != config.model:
        raise ConfigurationError(
            f"checkpoint model config {config.model.to_dict()} does not match {expected.to_dict()}"
        )
    state = init_state(config, meta["style_names"])
    with torch.no_grad():
        for n, p in state.model.named_parameters():
            key = f"model/{n}"
            if key not in tensors:
                raise ckpt.IntegrityError(f"parameter {n} absent", ckpt.METADATA)
            p.copy_(tensors[key])
    groups = _named_groups(state.model)
    for opt_name, opt in (("main", state.optimizer), ("heads", state.head_optimizer)):
        if opt is None:
            continue
        saved = meta["optimizers"].get(opt_name, {"steps": {}})["steps"]
        sd = opt.state_dict()
        for idx, (pname, _) in enumerate(groups[opt_name]):
            if pname not in saved:
                continue
            sd["state"][idx] = {
                "step": torch.tensor(saved[pname], dtype=torch.float32),
                "exp_avg": tensors[f"optim/{opt_name}/{pname}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim/{opt_name}/{pname}/exp_avg_sq"].clone(),
            }
        opt.load_state_dict(sd)
    rng = torch.from_numpy(np.frombuffer(bytes.fromhex(meta["rng_state"]), dtype=np.uint8).copy())
    state.generator.set_state(rng)
    state.iteration = int(meta["iteration"])
    state.epoch = int(meta["epoch"])
    return state


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    state: TrainState
    records: list[MetricsRecord]
    checkpoints: list[Path] = field(default_factory=list)


def _check_resume(config: TrainConfig, saved: TrainConfig) -> None:
    a, b = config.to_dict(), saved.to_dict()
    changed = sorted(k for k in a if k not in RESUMABLE_FIELDS and a[k] != b[k])
    if changed:
        raise ConfigurationError(f"resume config differs from the checkpoint in {changed}")


def train(config: TrainConfig, data: TripletArray,
          sink: Callable[[MetricsRecord], None] | None = None,
          checkpoint_dir: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Train to ``config.epochs`` on the (already split) training triplets.

    One MetricsRecord per optimizer step is passed to ``sink``. Checkpoints go
    to ``checkpoint_dir/epoch-NNNN`` every ``checkpoint_every`` epochs and at
    the end. On a non-finite loss the last checkpoint is left untouched and
    TrainingAborted propagates.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if resume is not None:
        state = load_checkpoint(resume, expected=config.model)
        _check_resume(config, state.config)
        state.config = config
        if state.style_names != list(data.style_names):
            raise ConfigurationError(f"checkpoint styles {state.style_names} != data styles {data.style_names}")
    else:
        state = init_state(config, list(data.style_names), data)
    result = TrainResult(state, [])
    step = train_step_dsed if config.variant == "dsed" else train_step_fen
    state.model.train()
    while state.epoch < config.epochs:
        for idx in epoch_batches(len(data), config.batch_triplets, config.seed, state.epoch):
            try:
                record = step(data.images[torch.as_tensor(idx)], state)
            except TrainingAborted:
                raise
            except NumericDomainError as e:
                parity = "n/a" if config.variant == "dsed" else Parity.of(state.iteration).value
                record = _nan_record(state.epoch, parity)
                raise TrainingAborted(f"non-finite values at epoch {state.epoch}: {e}", record) from e
            result.records.append(record)
            if sink is not None:
                sink(record)
        state.epoch += 1
        last = state.epoch == config.epochs
        periodic = config.checkpoint_every and state.epoch % config.checkpoint_every == 0
        if checkpoint_dir is not None and (periodic or last):
            path = save_checkpoint(state, Path(checkpoint_dir) / f"epoch-{state.epoch:04d}")
            result.checkpoints.append(path)
        log.debug("epoch %d done, iteration %d", state.epoch, state.iteration)
    return result


def summarize_epochs(records: list[MetricsRecord]) -> list[dict]:
    """Per-epoch means of the per-step records."""
    by_epoch: dict[int, list[MetricsRecord]] = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(r)
    out = []
    for epoch, recs in sorted(by_epoch.items()):
        row = {"epoch": epoch, "steps": len(recs)}
        for name in ("reconstruction", "kl", "friend_ce", "enemy_ce", "friend_acc", "enemy_acc"):
            row[name] = float(np.mean([getattr(r, name) for r in recs]))
        out.append(row)
    return out


def dsed_step_loss(images: torch.Tensor, state: TrainState) -> float:
    """Objective on a batch without updating anything (noise drawn from a fresh seeded RNG)."""
    model: DSEDModel = state.model
    gen = torch.Generator().manual_seed(state.config.seed)
    with torch.no_grad():
        out = dsed_forward(images, state.style_names, model, gen)
        k = len(model.style_names)
        total = 0.0
        for s in range(k):
            for t in range(k):
                total += float(dsed_loss(out.recon[s][t], images[:, t], out.params[s], 0.0).reconstruction)
        total += state.config.beta * sum(float(kl_divergence(g)) for g in out.params)
    return total
