"""Two-stage coarse-to-fine optimization, Adam, and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ParamStore, Tensor, backward, ops
from .data import PatchSampler
from .errors import ConfigError, DataError, NumericError
from .loss import Extractor, LossWeights, content_loss_terms, l1_loss
from .model import CisrModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGE2_LOSSES = ("content", "l1")


@dataclass(frozen=True)
class StageSchedule:
    """Step-decay learning rate over 1-based epochs.

    ``lr`` applies for epochs ``1..decay_epoch``; later epochs use
    ``lr * decay_factor``.
    """

    epochs: int
    lr: float
    decay_epoch: int
    decay_factor: float = 0.1
    steps_per_epoch: int = 1000
    clip_grad_norm: float | None = None
    loss: str = "content"

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be positive")
        if not 0 < self.decay_epoch < self.epochs:
            raise ConfigError(f"decay epoch {self.decay_epoch} must lie inside 1..{self.epochs - 1}")
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("learning rate and decay factor must be positive")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ConfigError("clip_grad_norm must be positive or null")
        if self.loss not in STAGE2_LOSSES:
            raise ConfigError(f"loss must be one of {STAGE2_LOSSES}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def epoch_of(self, step: int) -> int:
        return step // self.steps_per_epoch + 1

    def lr_at(self, epoch: int) -> float:
        if not 1 <= epoch <= self.epochs:
            raise ValueError(f"epoch {epoch} outside 1..{self.epochs}")
        return self.lr if epoch <= self.decay_epoch else self.lr * self.decay_factor

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StageSchedule:
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown schedule keys: {sorted(set(d) - known)}")
        return cls(**d)


STAGE1 = StageSchedule(epochs=100, lr=1e-4, decay_epoch=75, clip_grad_norm=None, loss="l1")
STAGE2 = StageSchedule(epochs=200, lr=0.75e-4, decay_epoch=150, clip_grad_norm=1.0, loss="content")


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, lr: float) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise NumericError(f"parameter {name} has no gradient")
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return total


@dataclass
class TrainState:
    stage: int
    seed: int
    rng: np.random.Generator
    optimizer: Adam = field(default_factory=Adam)
    step: int = 0  # optimizer steps completed in this stage
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, stage: int, seed: int) -> TrainState:
        return cls(stage=stage, seed=seed, rng=np.random.default_rng([seed, stage]))

    def epoch(self, schedule: StageSchedule) -> int:
        return schedule.epoch_of(max(self.step - 1, 0))


def _stage_loss(
    model: CisrModel, lr: Tensor, hr: Tensor, stage: int, schedule: StageSchedule, weights: LossWeights, extractor
) -> tuple[Tensor, dict[str, float]]:
    if stage == 1:
        pixel = l1_loss(model.coarse_forward(lr), hr)
        return ops.scalar_mul(pixel, weights.stage1_weight), {"l1": pixel.item()}
    _, fine = model(lr)
    if schedule.loss == "l1":
        w = dataclasses.replace(weights, lambda_p=0.0)
        return content_loss_terms(fine, hr, w, None)
    return content_loss_terms(fine, hr, weights, extractor)


def run_stage(
    model: CisrModel,
    sampler: PatchSampler,
    schedule: StageSchedule,
    stage: int,
    *,
    weights: LossWeights = LossWeights(),
    extractor: Extractor | None = None,
    state: TrainState | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    stop_after: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Optimize one stage until its schedule is exhausted.

    Stage 1 updates only ``coarse.*`` against ``stage1_weight * L1(coarse, gt)``;
    stage 2 updates every parameter against the stage loss on the refined output.
    ``stop_after`` halts early after that many total steps (used to test resume).
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if sampler.scale != model.scale:
        raise ConfigError(f"data scale x{sampler.scale} does not match model scale x{model.scale}")
    state = state or TrainState.fresh(stage, seed)
    if state.stage != stage:
        raise ConfigError(f"resuming stage {stage} from a stage-{state.stage} state")
    params = model.coarse_params() if stage == 1 else model.params
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    log_fh = open(log_path, "a") if log_path else None
    end = schedule.total_steps if stop_after is None else min(stop_after, schedule.total_steps)
    try:
        while state.step < end:
            epoch = schedule.epoch_of(state.step)
            lr = schedule.lr_at(epoch)
            batch = sampler.batch(state.rng)
            loss, terms = _stage_loss(model, batch.lr, batch.hr, stage, schedule, weights, extractor)
            model.params.zero_grad()
            try:
                backward(loss, params)
                grad_norm = clip_grad_norm(params, schedule.clip_grad_norm) if schedule.clip_grad_norm else None
                state.optimizer.step(params, lr)
            except NumericError as exc:
                raise NumericError(f"stage {stage} step {state.step + 1}: {exc}") from exc
            model.params.zero_grad()
            state.step += 1
            rec = {"stage": stage, "epoch": epoch, "step": state.step, "lr": lr, "loss": loss.item(), **terms}
            if grad_norm is not None:
                rec["grad_norm"] = grad_norm
            state.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if ckpt_dir and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"stage{stage}-last.npz", model, state, schedule)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_dir and state.step == schedule.total_steps:
        save_checkpoint(ckpt_dir / f"stage{stage}-final.npz", model, state, schedule)
    return state


def run_stage1(model, sampler, schedule=STAGE1, **kw) -> TrainState:
    return run_stage(model, sampler, schedule, 1, **kw)


def run_stage2(model, sampler, schedule=STAGE2, **kw) -> TrainState:
    return run_stage(model, sampler, schedule, 2, **kw)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(
    path: str | Path, model: CisrModel, state: TrainState | None = None, schedule: StageSchedule | None = None
) -> None:
    """Write parameters (+ optimizer moments and RNG state) to one ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.params.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "model_seed": model.seed,
        "dtype": model.dtype.name,
    }
    if state is not None:
        meta["train_state"] = {
            "stage": state.stage,
            "seed": state.seed,
            "step": state.step,
            "rng": state.rng.bit_generator.state,
            "adam": {"t": state.optimizer.t, "beta1": state.optimizer.beta1, "beta2": state.optimizer.beta2, "eps": state.optimizer.eps},
            "history": state.history,
        }
        arrays.update({f"adam_m/{k}": v for k, v in state.optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.optimizer.v.items()})
    if schedule is not None:
        meta["schedule"] = schedule.to_dict()
    arrays["__meta__"] = np.array(json.dumps(meta))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path, config: ModelConfig | None = None
) -> tuple[CisrModel, TrainState | None, dict]:
    """Rebuild the model (and training state, if saved) from a checkpoint.

    With ``config`` given, the stored model config must match it exactly.
    Returns ``(model, state, meta)``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    try:
        meta = json.loads(str(arrays.pop("__meta__")))
    except KeyError:
        raise DataError(f"{path}: not a checkpoint (no metadata)") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    stored = ModelConfig.from_dict(meta["model_config"])
    if config is not None and config != stored:
        diff = {k: (v, getattr(config, k)) for k, v in stored.to_dict().items() if getattr(config, k) != v}
        raise ConfigError(f"checkpoint config differs from requested config (stored, requested): {diff}")
    model = CisrModel(stored, seed=meta["model_seed"], dtype=np.dtype(meta["dtype"]))
    model.params.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    state = None
    ts = meta.get("train_state")
    if ts is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = ts["rng"]
        opt = Adam(ts["adam"]["beta1"], ts["adam"]["beta2"], ts["adam"]["eps"])
        opt.t = ts["adam"]["t"]
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                name = k[len("adam_m/"):]
                if name not in model.params or model.params[name].shape != v.shape:
                    raise ConfigError(f"{path}: optimizer moment {name} does not match the model")
                opt.m[name] = v.copy()
                opt.v[name] = arrays[f"adam_v/{name}"].copy()
        state = TrainState(ts["stage"], ts["seed"], rng, opt, ts["step"], list(ts["history"]))
    return model, state, meta
