"""Pseudo incremental learning: episodic training of the adapter on base data."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cec import AdapterParams, adapt_loss_graph, init_adapter
from .datasets import PseudoEpisode, sample_pseudo_episode
from .encoder import EncoderConfig, augment, embed, features
from .heads import fit_head, init_from_data
from .numerics import NonFiniteError, SgdState, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PilConfig:
    way: int = 15
    shot: int = 1
    query: int = 10
    angle_pool: tuple[float, ...] = (90.0, 180.0, 270.0)
    iterations: int = 5000
    lr: float = 2e-4
    lr_decay: float = 0.5
    decay_every: int = 1000
    momentum: float = 0.9
    last_layer_lr_ratio: float = 0.1       # 0 keeps the encoder untouched
    inner_epochs: int = 0
    inner_lr: float = 0.1
    head: str = "cosine"
    scale: float = 16.0
    augment: bool = True
    # adapter architecture
    heads: int = 1
    layer_norm: bool = False
    dropout: float = 0.1
    feat: bool = False
    proj_dim: int | None = None
    proj_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.way < 1 or self.shot < 1:
            raise ValueError("iterations, way and shot must all be >= 1")
        if not self.angle_pool:
            raise ValueError("angle_pool is empty")
        object.__setattr__(self, "angle_pool", tuple(float(a) for a in self.angle_pool))

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_pool"] = list(self.angle_pool)
        return d


def iteration_seed(seed: int, iteration: int) -> int:
    """Independent per-iteration seed; iteration -1 is reserved for adapter init."""
    return int(np.random.SeedSequence([seed, iteration + 1]).generate_state(1)[0])


@dataclass
class PilState:
    adapter: AdapterParams
    encoder: dict[str, np.ndarray]
    adapter_opt: SgdState | None = None
    last_opt: SgdState | None = None


def _episode_heads(params, cfg: EncoderConfig, ep: PseudoEpisode, sb, si, config: PilConfig, seed):
    heads = []
    for session, (imgs, labels) in enumerate(((sb, ep.support_base_labels),
                                              (si, ep.support_inc_labels))):
        emb = embed(params, imgs, cfg)
        h = init_from_data(emb, labels, config.head, config.scale, session)
        if config.inner_epochs:
            h = fit_head(h, emb, labels, config.inner_epochs, config.inner_lr, seed + session)
        heads.append(h)
    return heads


def pil_iteration(state: PilState, enc_cfg: EncoderConfig, base_data, config: PilConfig,
                  seed: int, lr: float | None = None) -> tuple[float, PilState]:
    """One episode: sample, build heads, adapt, score queries, one SGD step.

    Head construction is not differentiated; gradients reach the adapter
    and (if enabled) the encoder's last linear layer through the queries.
    """
    lr = config.lr if lr is None else lr
    rng = np.random.default_rng(seed)
    ep = sample_pseudo_episode(base_data, config.way, config.shot, config.query,
                               int(rng.integers(2**63)), config.angle_pool)
    sb, qb, si, qi = ep.support_base, ep.query_base, ep.support_inc, ep.query_inc
    if config.augment and enc_cfg.augment.active:
        sb, qb, si, qi = (augment(x, enc_cfg.augment, rng) for x in (sb, qb, si, qi))
    bank = _episode_heads(state.encoder, enc_cfg, ep, sb, si, config, int(rng.integers(2**31)))

    queries = np.concatenate([qb, qi])
    qlabels = np.concatenate([ep.query_base_labels, ep.query_inc_labels])
    last = {k: state.encoder[k] for k in enc_cfg.last_layer}
    train_last = config.last_layer_lr_ratio > 0
    lg = adapt_loss_graph(state.adapter, bank, features(state.encoder, queries, enc_cfg), qlabels,
                          config.head, last_layer=last, training=True,
                          dropout_seed=int(rng.integers(2**31)), train_last_layer=train_last)
    loss, grads = lg.backward()

    ad_opt = state.adapter_opt or SgdState(lr, config.momentum)
    ad_opt = SgdState(lr, config.momentum, ad_opt.velocity)
    tensors, ad_opt = sgd_step(state.adapter.tensors,
                               {k: grads[k] for k in state.adapter.tensors}, ad_opt)
    adapter = AdapterParams(tensors, state.adapter.heads, state.adapter.layer_norm,
                            state.adapter.dropout, state.adapter.feat)
    encoder, last_opt = state.encoder, state.last_opt
    if train_last:
        llr = lr * config.last_layer_lr_ratio
        last_opt = SgdState(llr, config.momentum, last_opt.velocity if last_opt else {})
        new_last, last_opt = sgd_step(last, {k: grads[k] for k in last}, last_opt)
        encoder = {**state.encoder, **new_last}
    return loss, PilState(adapter, encoder, ad_opt, last_opt)


@dataclass
class PilResult:
    adapter: AdapterParams
    encoder: dict[str, np.ndarray]
    log: list[tuple[int, float, float]] = field(default_factory=list)   # (iteration, loss, lr)


def run_pil(encoder_params, enc_cfg: EncoderConfig, base_data, config: PilConfig,
            adapter: AdapterParams | None = None) -> PilResult:
    if adapter is None:
        adapter = init_adapter(enc_cfg.embed_dim, iteration_seed(config.seed, -1),
                               proj_dim=config.proj_dim, heads=config.heads,
                               layer_norm=config.layer_norm, dropout=config.dropout,
                               feat=config.feat, proj_scale=config.proj_scale)
    state = PilState(adapter, dict(encoder_params))
    history = []
    for it in range(config.iterations):
        lr = config.lr_at(it)
        try:
            loss, state = pil_iteration(state, enc_cfg, base_data, config,
                                        iteration_seed(config.seed, it), lr)
        except NonFiniteError as err:
            raise FloatingPointError(f"PIL diverged at iteration {it}: {err}") from err
        if not np.isfinite(loss):
            raise FloatingPointError(f"PIL diverged at iteration {it}")
        history.append((it, loss, lr))
        if it % 100 == 0:
            log.debug("pil iteration %d loss %.4f lr %.3g", it, loss, lr)
    return PilResult(state.adapter, state.encoder, history)
