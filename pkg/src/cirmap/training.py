"""Training loop: forward through the frozen composer, selection, combined loss,
AdamW with linear warmup, and ablation switches.

Randomness flows from the configured seed only: mapper initialization and
epoch shuffling use independent seeded streams, so identical configs yield
bit-identical parameter trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import mining
from .autodiff import Tape, Tensor
from .composer import ComposerSpec, PromptComposer
from .errors import (
    DegenerateInputError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .mappers import MapperParams, ROLE_PSEUDO, ROLE_SUPPLEMENT, init_mapper, map_rows

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 500
    learning_rate: float = 5e-4
    weight_decay: float = 0.1
    warmup_steps: int = 50
    tau: float = 0.01
    sigma: float = 0.01
    lam: float = 0.5  # caption-similarity threshold ("lambda" in config files)
    alpha: float = 1.0
    beta: float = 2.0
    seed: int = 0
    use_itcon: bool = True
    use_mse: bool = True
    use_sset: bool = True
    sset_select: bool = True  # False: use the full batch instead of the filter
    dim: int = 32
    hidden: int = 128
    composer_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.warmup_steps < 0:
            raise ParameterError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.tau > 0 or not self.sigma > 0:
            raise ParameterError("tau and sigma must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be non-negative")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ParameterError("learning_rate and weight_decay must be non-negative")

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(alpha=self.alpha, beta=self.beta, tau=self.tau)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then constant."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    weight_decay: float,
) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam update; bias-corrected, 64-bit math.

    Decay applies before the Adam delta. Parameters without a gradient entry
    are left untouched (their moments do not advance either).
    """
    if lr_t < 0:
        raise ParameterError(f"lr_t must be >= 0, got {lr_t}")
    state.step += 1
    t = state.step
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        theta = p.values.astype(np.float64)
        theta -= lr_t * weight_decay * theta
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        theta -= lr_t * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        out[name] = Tensor(theta.astype(np.float32), requires_grad=True)
    return out


@dataclass
class Mappers:
    pseudo: MapperParams
    supplement: MapperParams

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.pseudo.named() + self.supplement.named())

    def apply_update(self, updated: dict[str, Tensor]) -> "Mappers":
        def pick(mapper: MapperParams) -> MapperParams:
            new = {
                key: updated[f"{mapper.role}.{key}"]
                for key in mapper.weights
                if f"{mapper.role}.{key}" in updated
            }
            return mapper.replaced(new)

        return Mappers(pick(self.pseudo), pick(self.supplement))


def init_mappers(config: TrainConfig) -> Mappers:
    seeds = np.random.SeedSequence([config.seed, 0]).generate_state(2)
    return Mappers(
        pseudo=init_mapper(ROLE_PSEUDO, config.dim, config.hidden, int(seeds[0])),
        supplement=init_mapper(ROLE_SUPPLEMENT, config.dim, config.hidden, int(seeds[1])),
    )


def forward_batch(
    images: np.ndarray, texts: np.ndarray, mappers: Mappers, composer: PromptComposer
) -> L.BatchEmbeddings:
    """Build one batch graph: map both modalities to tokens and compose prompts."""
    images_t = Tensor(images)
    texts_t = Tensor(texts)
    composed_pseudo = composer.compose_rows("photo_of", [map_rows(mappers.pseudo, images_t)])
    composed_supplement = composer.compose_rows(
        "photo_of", [map_rows(mappers.supplement, texts_t)]
    )
    return L.BatchEmbeddings(images_t, texts_t, composed_pseudo, composed_supplement)


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


@dataclass
class TrainResult:
    mappers: Mappers
    metrics: list[dict]
    composer: PromptComposer


def train(
    config: TrainConfig,
    images: np.ndarray,
    texts: np.ndarray,
    composer: PromptComposer | None = None,
) -> TrainResult:
    """Run the configured number of steps over seeded epoch reshuffles.

    The dataset is (image, text) unit rows, row-aligned. The last partial
    batch of each epoch is dropped, since subset selection treats the full
    batch as the negative pool.
    """
    images = np.ascontiguousarray(images, dtype=np.float32)
    texts = np.ascontiguousarray(texts, dtype=np.float32)
    if images.ndim != 2 or images.shape != texts.shape:
        raise ShapeError(f"dataset blocks disagree: {images.shape} vs {texts.shape}")
    n = images.shape[0]
    if n == 0:
        raise ShapeError("empty dataset")
    if images.shape[1] != config.dim:
        raise ShapeError(f"dataset dim {images.shape[1]} != configured dim {config.dim}")
    if n < config.batch_size:
        raise ShapeError(
            f"dataset of {n} pairs cannot fill one batch of {config.batch_size}"
        )

    if composer is None:
        composer = PromptComposer(ComposerSpec(dim=config.dim, seed=config.composer_seed))
    frozen_hash = composer.weights_hash()

    mappers = init_mappers(config)
    state = OptimizerState()
    shuffle_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([config.seed, 1]))
    )

    batches_per_epoch = n // config.batch_size
    order: np.ndarray | None = None
    metrics: list[dict] = []

    for step in range(config.steps):
        pos = step % batches_per_epoch
        if pos == 0:
            order = shuffle_rng.permutation(n)
        rows = order[pos * config.batch_size : (pos + 1) * config.batch_size]
        batch_images = images[rows]
        batch_texts = texts[rows]

        try:
            mappers, step_metrics = _train_step(
                config, mappers, composer, batch_images, batch_texts, state, step
            )
        except (DegenerateInputError, FloatingPointError) as exc:
            raise TrainingDivergedError(f"numerical fault at step {step}: {exc}") from exc
        metrics.append(step_metrics)
        if step % 100 == 0 or step == config.steps - 1:
            log.info(
                "step %d: L_deg=%.4f (N_S=%d)", step, step_metrics["L_deg"], step_metrics["N_S"]
            )

    if composer.weights_hash() != frozen_hash:
        raise TrainingDivergedError("frozen composer weights changed during training")
    return TrainResult(mappers=mappers, metrics=metrics, composer=composer)


def _train_step(config, mappers, composer, batch_images, batch_texts, state, step):
    with Tape() as tape:
        batch = forward_batch(batch_images, batch_texts, mappers, composer)

        if config.use_sset:
            if config.sset_select:
                selection = mining.select_batch(
                    batch_images, batch_texts, config.sigma, config.lam
                )
            else:
                selection = mining.full_batch_selection(config.batch_size)
            n_selected = selection.count
        else:
            selection = None
            n_selected = 0

        l_ori = L.loss_ori(batch, config.tau)
        l_itcon = L.loss_itcon(batch, config.tau) if config.use_itcon else _zero()
        l_mse = L.loss_mse(batch) if config.use_mse else _zero()
        l_ts = ad.add(l_itcon, ad.scale(l_mse, config.alpha))
        l_ss = L.loss_sset(batch, selection, config.tau) if config.use_sset else _zero()
        l_total = ad.add(ad.add(l_ori, l_ts), ad.scale(l_ss, config.beta))

        if not np.isfinite(l_total.values):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: "
                f"ori={l_ori.item()!r} itcon={l_itcon.item()!r} "
                f"mse={l_mse.item()!r} ss={l_ss.item()!r}"
            )

        grad_map = ad.backward(l_total, tape)

    params = mappers.named_params()
    grads = {
        name: grad_map[tensor].values
        for name, tensor in params.items()
        if tensor in grad_map
    }
    lr_t = lr_schedule(step, config.learning_rate, config.warmup_steps)
    mappers = mappers.apply_update(
        adamw_step(params, grads, state, lr_t, config.weight_decay)
    )

    step_metrics = {
        "step": step,
        "lr": lr_t,
        "L_ori": l_ori.item(),
        "L_itcon": l_itcon.item(),
        "L_mse": l_mse.item(),
        "L_ts": l_ts.item(),
        "L_ss": l_ss.item(),
        "L_deg": l_total.item(),
        "N_S": n_selected,
    }
    return mappers, step_metrics
