"""Fixed-seed pretraining of the base tiny LM on the general corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import corpus_tokens, generate_pretrain_corpus
from .lm import LmConfig, ModelState, init_base_params, run_transformer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 16
    seq_len: int = 96
    lr: float = 3e-3
    warmup: int = 100
    weight_decay: float = 0.0
    corpus_size: int = 4000
    seed: int = 0


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.99), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


def pretrain(lm_config: LmConfig | None = None, cfg: PretrainConfig | None = None,
             callback=None) -> tuple[ModelState, list[float]]:
    """Train base weights from scratch; returns (state, per-step losses)."""
    lm_config = lm_config or LmConfig()
    cfg = cfg or PretrainConfig()
    if cfg.seq_len + 1 > lm_config.max_context + 1:
        raise ValueError("seq_len exceeds max_context")
    rng = np.random.default_rng(cfg.seed)
    stream = corpus_tokens(generate_pretrain_corpus(cfg.seed, cfg.corpus_size))
    params = {k: Tensor(v, requires_grad=True, name=k)
              for k, v in init_base_params(lm_config, cfg.seed).items()}
    opt = Adam(params, cfg.lr)
    losses = []
    for step in range(cfg.steps):
        starts = rng.integers(0, len(stream) - cfg.seq_len - 1, size=cfg.batch_size)
        idx = starts[:, None] + np.arange(cfg.seq_len + 1)[None, :]
        chunk = stream[idx]
        logits = run_transformer(lm_config, params, chunk[:, :-1])
        loss = ad.cross_entropy(logits, chunk[:, 1:])
        loss.backward()
        if step < cfg.warmup:
            lr = cfg.lr * (step + 1) / cfg.warmup
        else:
            frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
            lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * frac))
        opt.step(lr)
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    state = ModelState(lm_config, {k: p.data for k, p in params.items()}, adapter_seed=cfg.seed)
    return state, losses
