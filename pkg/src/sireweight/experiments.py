"""Held-out evaluation and the desk-scale experiments.

Each experiment is a plain function returning a small record so tests and
the CLI can share it.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (DataConfig, GeneratorSpec, MixtureCounts, Sample, Vocab, build_mixture, collate,
                   corrupt_sample, gen_corpus, permute_tokens)
from .filter import FilterSpec, sequential_pipeline
from .influence import SIReport, score_dataset, si_report
from .reweight import ReweightConfig, TrainConfig, train
from .toy_lm import ModelConfig, ToyLM, default_layer_set

log = logging.getLogger(__name__)


def eval_loss(model: ToyLM, samples: Sequence[Sample], data_config: DataConfig = DataConfig(),
              batch_size: int = 32) -> float:
    """Mean per-sample span-corruption loss under the fixed epoch-0 corruption."""
    if not samples:
        raise ValueError("cannot evaluate on an empty set")
    vocab = model.vocab
    top = max(int(s.token_ids.max()) for s in samples)
    if top >= vocab.size:
        raise ValueError(f"held-out token id {top} does not fit the model vocab of size {vocab.size}")
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        batch = collate([corrupt_sample(s, data_config, vocab) for s in chunk], vocab)
        total += model.loss(batch) * len(chunk)
    return total / len(samples)


def noise_fraction(samples: Sequence[Sample]) -> float:
    return sum(s.provenance != "clean" for s in samples) / len(samples)


# ---------------------------------------------------------------------------
# Noisy / shifted text gets higher SI
# ---------------------------------------------------------------------------


@dataclass
class SIDirectionResult:
    permuted: SIReport
    shifted: SIReport
    train_loss_start: float
    train_loss_end: float


def si_direction_experiment(seed: int = 0, steps: int = 2000, n_train: int = 2000, n_eval: int = 500,
                            model_config: ModelConfig = ModelConfig(), seq_len: int = 32,
                            minibatch_size: int = 16) -> SIDirectionResult:
    """Train a scorer on clean text, then compare SI of clean vs permuted / shifted samples."""
    vocab = model_config.vocab
    spec_a = GeneratorSpec("markov_A", seq_len=seq_len, vocab_size=vocab.size, n_sentinels=vocab.n_sentinels)
    spec_b = GeneratorSpec("markov_B", seq_len=seq_len, vocab_size=vocab.size, n_sentinels=vocab.n_sentinels)
    train_set = gen_corpus(spec_a, n_train, seed)
    clean = gen_corpus(spec_a, n_eval, seed + 10_000)
    permuted = [permute_tokens(s, seed * 1_000_003 + i) for i, s in enumerate(clean)]
    shifted = gen_corpus(spec_b, n_eval, seed + 20_000)

    data = DataConfig(minibatch_size=minibatch_size, seed=seed)
    cfg = TrainConfig(total_steps=steps, variant="baseline", reweight=ReweightConfig(n_microbatches=1),
                      model=replace(model_config, seed=seed), data=data)
    result = train(cfg, train_set)
    model = result.model
    layers = default_layer_set(model)
    s_clean, _ = score_dataset(model, clean, layers, data)
    s_perm, _ = score_dataset(model, permuted, layers, data)
    s_shift, _ = score_dataset(model, shifted, layers, data)
    losses = [l.minibatch_loss for l in result.logs]
    return SIDirectionResult(si_report(s_clean, s_perm), si_report(s_clean, s_shift),
                             float(np.mean(losses[:20])), float(np.mean(losses[-50:])))


# ---------------------------------------------------------------------------
# Filtering by SI rank
# ---------------------------------------------------------------------------

FAST_MODEL = ModelConfig(d_model=32)


@dataclass
class FilterRunResult:
    mode: str
    noise_fraction: float
    heldout_loss: float


@dataclass
class FilterExperimentResult:
    seed: int
    corpus_noise_fraction: float
    runs: dict[str, FilterRunResult] = field(default_factory=dict)


def filter_experiment(seed: int = 0, counts: MixtureCounts = MixtureCounts(700, 300), keep: int = 700,
                      steps: int = 2000, scorer_steps: int | None = 1200, n_heldout: int = 300,
                      model_config: ModelConfig = FAST_MODEL, scorer_config: ModelConfig = ModelConfig(),
                      seq_len: int = 32,
                      minibatch_size: int = 16, work_dir: str | Path | None = None,
                      modes: Sequence[str] = ("keep_lowest", "keep_highest")) -> FilterExperimentResult:
    """Score a noisy mixture, filter it both ways, pre-train on each kept set, evaluate.

    The scorer is trained on the raw mixture itself. ``scorer_steps=None``
    falls back to 20% of ``steps``, which at this scale is too immature to
    rank the noise reliably, hence the longer default.
    """
    vocab = model_config.vocab
    corpus = build_mixture(counts, seed, seq_len, vocab)
    heldout = gen_corpus(GeneratorSpec("markov_A", seq_len=seq_len, vocab_size=vocab.size,
                                       n_sentinels=vocab.n_sentinels), n_heldout, seed + 30_000)
    data = DataConfig(minibatch_size=minibatch_size, seed=seed)
    base = TrainConfig(total_steps=steps, variant="baseline", reweight=ReweightConfig(n_microbatches=1),
                       model=replace(model_config, seed=seed), data=data)
    if scorer_steps is None:
        scorer_steps = max(1, round(0.2 * steps))
    scorer = train(replace(base, total_steps=scorer_steps, model=replace(scorer_config, seed=seed)), corpus).model

    out = FilterExperimentResult(seed, noise_fraction(corpus))
    for mode in modes:
        wd = Path(work_dir) / mode if work_dir is not None else _tmpdir()
        res = sequential_pipeline(corpus, scorer, FilterSpec(keep, mode), base, wd)
        kept = [corpus[i] for i in res.kept]
        out.runs[mode] = FilterRunResult(mode, noise_fraction(kept), eval_loss(res.train.model, heldout, data))
        log.info("seed %d %s: noise %.3f heldout %.4f", seed, mode, out.runs[mode].noise_fraction,
                 out.runs[mode].heldout_loss)
    return out


def _tmpdir() -> Path:
    import tempfile

    return Path(tempfile.mkdtemp(prefix="sirw-"))


# ---------------------------------------------------------------------------
# Two-stage schedule vs its mirror
# ---------------------------------------------------------------------------


@dataclass
class ScheduleExperimentResult:
    seed: int
    heldout_loss: dict[str, float] = field(default_factory=dict)


def schedule_experiment(seed: int = 0, variants: Sequence[str] = ("presence", "presence_i_d"),
                        counts: MixtureCounts = MixtureCounts(700, 300), steps: int = 4000,
                        switch_step: int = 2000, n_microbatches: int = 8, minibatch_size: int = 16,
                        n_heldout: int = 300, model_config: ModelConfig = ModelConfig(),
                        seq_len: int = 32) -> ScheduleExperimentResult:
    """Pre-train each variant on the same noisy mixture and report held-out clean loss."""
    vocab: Vocab = model_config.vocab
    corpus = build_mixture(counts, seed, seq_len, vocab)
    heldout = gen_corpus(GeneratorSpec("markov_A", seq_len=seq_len, vocab_size=vocab.size,
                                       n_sentinels=vocab.n_sentinels), n_heldout, seed + 30_000)
    data = DataConfig(minibatch_size=minibatch_size, seed=seed)
    out = ScheduleExperimentResult(seed)
    for variant in variants:
        cfg = TrainConfig(total_steps=steps, variant=variant,
                          reweight=ReweightConfig(tau1=1.0, tau2=-1.0, switch_step=switch_step,
                                                  n_microbatches=n_microbatches),
                          model=replace(model_config, seed=seed), data=data)
        model = train(cfg, corpus).model
        out.heldout_loss[variant] = eval_loss(model, heldout, data)
        log.info("seed %d %s: heldout %.4f", seed, variant, out.heldout_loss[variant])
    return out
