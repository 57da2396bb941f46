"""Shared builders and the finite-difference checker used across the tests."""

from __future__ import annotations

import numpy as np

from sireweight.data import DataConfig, GeneratorSpec, Microbatch, Minibatch, collate, corrupt_sample, gen_corpus
from sireweight.toy_lm import ModelConfig, ToyLM, build_model

TINY = ModelConfig(vocab_size=48, n_sentinels=8, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                   max_input_len=16, max_target_len=8, seed=0)
SMALL = ModelConfig(vocab_size=48, n_sentinels=8, d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2,
                    max_input_len=16, max_target_len=8, seed=0)


def tiny_spec(cfg: ModelConfig = TINY, seq_len: int = 12, kind: str = "markov_A") -> GeneratorSpec:
    return GeneratorSpec(kind, seq_len=seq_len, vocab_size=cfg.vocab_size, n_sentinels=cfg.n_sentinels)


def tiny_corpus(count: int, seed: int = 0, cfg: ModelConfig = TINY, seq_len: int = 12):
    return gen_corpus(tiny_spec(cfg, seq_len), count, seed)


def examples(samples, cfg: ModelConfig = TINY, data: DataConfig = DataConfig()):
    return [corrupt_sample(s, data, cfg.vocab) for s in samples]


def minibatch(samples, n_micro: int, cfg: ModelConfig = TINY) -> Minibatch:
    ex = examples(samples, cfg)
    k = len(ex) // n_micro
    return Minibatch([Microbatch(ex[i * k:(i + 1) * k]) for i in range(n_micro)])


def perturbed_model(cfg: ModelConfig, scale: float = 0.3, seed: int = 1) -> ToyLM:
    """Model whose LayerNorm gains/biases and weights are far from their init values."""
    m = build_model(cfg)
    rng = np.random.default_rng(seed)
    for k, v in m.params.items():
        m.params[k] = v + rng.normal(0.0, scale, v.shape)
    return m


def fd_check(model: ToyLM, batch, h: float = 1e-5, max_per_tensor: int | None = None, seed: int = 0):
    """Compare autodiff against central differences.

    Returns ``(worst_elementwise, worst_normwise)`` where the elementwise
    relative error uses a 1e-3 floor in the denominator and the norm-wise one
    is ``||a - fd|| / ||fd||`` per tensor (restricted to checked entries).
    """
    if not hasattr(batch, "enc_ids"):
        batch = collate(batch, model.vocab)
    _, grads = model.loss_and_grad(batch)
    rng = np.random.default_rng(seed)
    worst_el = worst_norm = 0.0
    for key, v in model.params.items():
        idx = np.arange(v.size)
        if max_per_tensor is not None and v.size > max_per_tensor:
            idx = rng.choice(v.size, max_per_tensor, replace=False)
        a = grads[key].reshape(-1)[idx]
        fd = np.empty(idx.size)
        flat = v.flat
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = model.loss(batch)
            flat[i] = old - h
            lm = model.loss(batch)
            flat[i] = old
            fd[j] = (lp - lm) / (2 * h)
        den = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-3)
        worst_el = max(worst_el, float((np.abs(a - fd) / den).max()))
        nfd = np.linalg.norm(fd)
        if nfd > 0:
            worst_norm = max(worst_norm, float(np.linalg.norm(a - fd) / nfd))
        else:
            worst_norm = max(worst_norm, float(np.linalg.norm(a)))
    return worst_el, worst_norm
