"""Training loop: per-iteration view sampling, stepped learning rate, SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import sgd_step
from .config import TrainConfig
from .datagen import Dataset, DatasetObject
from .errors import DivergedLoss, MissingViews, NumericalOverflow, TooFewObjects
from .model import MultiViewReconstructor
from .voxels import LOSS_FUNCTIONS


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epochs_run: int = 0
    iterations_run: int = 0
    rng_state: dict | None = None


def data_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0xda7a])


def sample_batch(objects: list[DatasetObject], cfg: TrainConfig,
                 rng: np.random.Generator):
    """Stack a batch, sampling views per object without replacement."""
    images, grids = [], []
    for obj in objects:
        pool = obj.views.shape[0]
        if cfg.views_per_sample > pool:
            raise MissingViews(
                f"need {cfg.views_per_sample} views, object has {pool}")
        picked = rng.choice(pool, size=cfg.views_per_sample, replace=False)
        images.append(obj.views[picked])
        grids.append(obj.grid)
    return np.stack(images), np.stack(grids)


def train_step(model: MultiViewReconstructor, images: np.ndarray,
               targets: np.ndarray, cfg: TrainConfig, lr: float) -> float:
    loss_fn = LOSS_FUNCTIONS[cfg.loss_mode]
    try:
        out = model.forward(images.astype(cfg.model.np_dtype, copy=False))
        loss = loss_fn(targets.astype(cfg.model.np_dtype, copy=False), out.refined)
        if cfg.aux_coarse_weight > 0.0 and model.refiner is not None:
            aux = loss_fn(targets.astype(cfg.model.np_dtype, copy=False), out.coarse)
            loss = ad.add(loss, ad.scale(aux, cfg.aux_coarse_weight))
        value = loss.item()
        if not np.isfinite(value):
            raise DivergedLoss(f"loss is {value}")
        model.zero_grads()
        loss.backward()
    except NumericalOverflow as exc:
        raise DivergedLoss(f"forward/backward overflowed: {exc}") from exc
    params = model.parameters()
    grads = []
    for name, p in model.named_params():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergedLoss(f"non-finite gradient in {name}")
        grads.append(g)
    sgd_step(params, grads, lr)
    return value


def train(model: MultiViewReconstructor, dataset: Dataset, cfg: TrainConfig,
          log_every: int = 0, progress=None) -> TrainResult:
    """Run the configured epochs (or ``max_iterations``) over the train split.

    Deterministic given the seed: object order, view sampling, and updates
    all draw from one generator in a fixed order.
    """
    train_objs = dataset.split("train")
    if not train_objs:
        raise TooFewObjects("train split is empty")
    rng = data_rng(cfg.seed)
    result = TrainResult()
    done = False
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(train_objs))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_objs[i] for i in order[start:start + cfg.batch_size]]
            images, grids = sample_batch(batch, cfg, rng)
            try:
                value = train_step(model, images, grids, cfg, lr)
            except DivergedLoss as exc:
                raise DivergedLoss(
                    f"iteration {result.iterations_run}, epoch {epoch}: {exc}"
                ) from exc
            result.losses.append(value)
            result.lrs.append(lr)
            result.iterations_run += 1
            if log_every and result.iterations_run % log_every == 0 and progress:
                progress(result.iterations_run, value, lr)
            if cfg.max_iterations and result.iterations_run >= cfg.max_iterations:
                done = True
                break
        result.epochs_run = epoch + 1
        if done:
            break
    result.rng_state = rng.bit_generator.state
    return result


def loss_curve_csv(result: TrainResult) -> str:
    lines = ["iteration,lr,loss"]
    for i, (lr, loss) in enumerate(zip(result.lrs, result.losses)):
        lines.append(f"{i},{lr:.6g},{loss:.10g}")
    return "\n".join(lines) + "\n"
