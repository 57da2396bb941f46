"""Online microbatch reweighting by self-influence.

Each step splits the minibatch into ``n`` microbatches, takes one gradient
per microbatch, scores each gradient by its (layer-restricted) squared norm,
standardizes the scores, turns them into softmax weights at temperature
``tau`` and applies the weighted sum of gradients. ``tau`` follows a
two-stage schedule: ``tau1`` up to and including the switch step, ``tau2``
afterwards.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataConfig, Minibatch, Sample, batch_iterator
from .grad_core import NumericError, ParamStore, grad_dot
from .influence import ScoreArray
from .toy_lm import ModelConfig, ToyLM, build_model, save_checkpoint, validate_layer_set

VARIANTS = ("baseline", "presence", "presence_d", "presence_i", "presence_i_d")
WEIGHT_SCALES = ("paper_literal", "sum_preserving")


def canonical_variant(name: str) -> str:
    v = name.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return v


@dataclass(frozen=True)
class ReweightConfig:
    tau1: float = 1.0
    tau2: float = -1.0
    switch_step: int = 0
    n_microbatches: int = 8
    epsilon: float = 1e-8
    layers: tuple[str, ...] = ("enc_0", "dec_0")
    weight_scale: str = "paper_literal"

    def __post_init__(self):
        if self.n_microbatches < 1:
            raise ValueError("n_microbatches must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.switch_step < 0:
            raise ValueError("switch_step must be >= 0")
        if self.weight_scale not in WEIGHT_SCALES:
            raise ValueError(f"weight_scale must be one of {WEIGHT_SCALES}")
        if not self.layers:
            raise ValueError("layer set must be non-empty")
        object.__setattr__(self, "layers", tuple(sorted(self.layers)))


@dataclass
class StepLog:
    step: int
    tau: float
    raw_scores: list[float]
    weights: list[float]
    minibatch_loss: float
    weight_entropy: float
    variant: str = "baseline"


def normalize_scores(s: ScoreArray | Sequence[float], epsilon: float | None = None) -> ScoreArray:
    """Standardize with the population variance: ``(s - mean) / sqrt(var + eps)``."""
    if isinstance(s, ScoreArray):
        eps = s.epsilon if epsilon is None else epsilon
        x = s.scores
    else:
        eps = 1e-8 if epsilon is None else epsilon
        x = np.asarray(s, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty score array")
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return ScoreArray((x - mu) / math.sqrt(var + eps), normalized=True, epsilon=eps)


def softmax_weights(s_norm: ScoreArray | Sequence[float], tau: float) -> np.ndarray:
    x = s_norm.scores if isinstance(s_norm, ScoreArray) else np.asarray(s_norm, dtype=np.float64)
    z = tau * x
    e = np.exp(z - z.max())
    return e / e.sum()


def schedule_tau(step: int, config: ReweightConfig) -> float:
    if step < 1:
        raise ValueError("steps are 1-based")
    return config.tau1 if step <= config.switch_step else config.tau2


def variant_tau(step: int, variant: str, config: ReweightConfig) -> float | None:
    """Temperature used by ``variant`` at ``step``; ``None`` for the unweighted baseline."""
    variant = canonical_variant(variant)
    if variant == "baseline":
        return None
    if variant == "presence_d":
        return config.tau1
    if variant == "presence_i":
        return config.tau2
    if variant == "presence_i_d":
        return schedule_tau(step, ReweightConfig(tau1=config.tau2, tau2=config.tau1,
                                                 switch_step=config.switch_step, layers=config.layers))
    return schedule_tau(step, config)


def weight_entropy(w: np.ndarray) -> float:
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 100


class Adam:
    """Adam with linear warmup then inverse-square-root decay."""

    def __init__(self, params: ParamStore, config: AdamConfig = AdamConfig()):
        self.config = config
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def lr_at(self, step: int) -> float:
        w = max(self.config.warmup_steps, 1)
        return self.config.lr * min(step / w, math.sqrt(w / step))

    def apply(self, params: ParamStore, grads: ParamStore) -> None:
        self.t += 1
        c = self.config
        lr = self.lr_at(self.t)
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# ---------------------------------------------------------------------------
# Algorithm 1 / Algorithm 2 steps
# ---------------------------------------------------------------------------


def _microbatch_grads(model: ToyLM, minibatch: Minibatch) -> tuple[list[float], list[ParamStore]]:
    losses, grads = [], []
    for mb in minibatch.microbatches:
        loss, g = model.loss_and_grad(mb)
        losses.append(loss)
        grads.append(g)
    return losses, grads


def _aggregate(grads: Sequence[ParamStore], weights: Sequence[float] | None) -> ParamStore:
    total = grads[0].zeros_like()
    for i, g in enumerate(grads):
        total.add_scaled_(g, 1.0 if weights is None else float(weights[i]))
    return total


def unweighted_step(model: ToyLM, minibatch: Minibatch, optimizer: Adam,
                    layers: Iterable[str] = ("enc_0", "dec_0"), step: int = 0) -> StepLog:
    """Plain microbatched step: ``G = sum_i g_i``."""
    layers = validate_layer_set(model, layers)
    losses, grads = _microbatch_grads(model, minibatch)
    raw = [grad_dot(g, g, layers) for g in grads]
    optimizer.apply(model.params, _aggregate(grads, None))
    n = len(grads)
    w = np.full(n, 1.0 / n)
    return StepLog(step, math.nan, raw, w.tolist(), float(np.mean(losses)), weight_entropy(w))


def weighted_step(model: ToyLM, minibatch: Minibatch, optimizer: Adam, config: ReweightConfig,
                  step: int, tau: float | None = None, variant: str = "presence") -> StepLog:
    """SI-weighted microbatched step: ``G = sum_i w_i g_i``.

    ``tau`` defaults to ``schedule_tau(step, config)``. Non-finite scores or
    weights raise before the optimizer touches the parameters.
    """
    layers = validate_layer_set(model, config.layers)
    if minibatch.n_microbatches != config.n_microbatches:
        raise ValueError(
            f"minibatch has {minibatch.n_microbatches} microbatches, config expects {config.n_microbatches}"
        )
    if tau is None:
        tau = schedule_tau(step, config)
    losses, grads = _microbatch_grads(model, minibatch)
    raw = np.array([grad_dot(g, g, layers) for g in grads])
    if not np.isfinite(raw).all():
        bad = int(np.flatnonzero(~np.isfinite(raw))[0])
        raise NumericError(f"step {step}: non-finite SI score {raw[bad]!r} for microbatch {bad}")
    w = softmax_weights(normalize_scores(ScoreArray(raw, epsilon=config.epsilon)), tau)
    if not np.isfinite(w).all():
        raise NumericError(f"step {step}: non-finite microbatch weights {w.tolist()}")
    g_total = _aggregate(grads, w)
    if config.weight_scale == "sum_preserving":
        g_total.scale_(float(len(grads)))
    optimizer.apply(model.params, g_total)
    return StepLog(step, float(tau), raw.tolist(), w.tolist(), float(np.mean(losses)),
                   weight_entropy(w), variant)


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------

METRICS_HEADER = "step\tvariant\ttau\tloss\tmin_w\tmax_w\tmean_w\tweight_entropy"


def metrics_line(log: StepLog) -> str:
    w = np.asarray(log.weights)
    return "\t".join([str(log.step), log.variant, repr(float(log.tau)), repr(log.minibatch_loss),
                      repr(float(w.min())), repr(float(w.max())), repr(float(w.mean())),
                      repr(log.weight_entropy)])


def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        row = dict(zip(cols, line.split("\t")))
        out.append({k: (v if k == "variant" else (int(v) if k == "step" else float(v)))
                    for k, v in row.items()})
    return out


@dataclass
class TrainResult:
    model: ToyLM
    logs: list[StepLog] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def prepare_run_dir(run_dir: str | Path) -> Path:
    """Create a fresh run directory; existing non-empty directories are refused."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise FileExistsError(f"run directory {run_dir} is not empty (run directories are append-only)")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def run_pretraining(config: ReweightConfig, model_config: ModelConfig, corpus: Sequence[Sample],
                    total_steps: int, variant: str = "presence", data_config: DataConfig = DataConfig(),
                    adam: AdamConfig = AdamConfig(), run_dir: str | Path | None = None,
                    checkpoint_every: int = 0, manifest_extra: dict | None = None,
                    on_step: Callable[[StepLog], None] | None = None) -> TrainResult:
    """Train a fresh model for ``total_steps`` with the selected variant.

    With ``run_dir`` set, writes ``manifest.json``, ``metrics.tsv`` (one line
    per step), periodic ``ckpt_<step>.bin`` and ``final.bin``.
    """
    variant = canonical_variant(variant)
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    model = build_model(model_config)
    validate_layer_set(model, config.layers)
    opt = Adam(model.params, adam)
    stream: Iterator[Minibatch] = batch_iterator(
        corpus, data_config.minibatch_size, config.n_microbatches, data_config.seed,
        epochs=None, cfg=data_config, vocab=model.vocab)
    result = TrainResult(model)

    metrics = None
    if run_dir is not None:
        run_dir = prepare_run_dir(run_dir)
        manifest = {
            "code_version": __version__,
            "variant": variant,
            "total_steps": total_steps,
            "start_step": 1,
            "end_step": total_steps,
            "reweight": asdict(config),
            "model": asdict(model_config),
            "data": asdict(data_config),
            "optimizer": asdict(adam),
            "checkpoint_every": checkpoint_every,
            "artifacts": {"metrics": "metrics.tsv", "final_checkpoint": "final.bin"},
        }
        manifest.update(manifest_extra or {})
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        metrics = open(run_dir / "metrics.tsv", "w")
        metrics.write(METRICS_HEADER + "\n")
    try:
        for step in range(1, total_steps + 1):
            minibatch = next(stream)
            tau = variant_tau(step, variant, config)
            if tau is None:
                log = unweighted_step(model, minibatch, opt, config.layers, step)
            else:
                log = weighted_step(model, minibatch, opt, config, step, tau=tau, variant=variant)
            result.logs.append(log)
            if metrics is not None:
                metrics.write(metrics_line(log) + "\n")
            if on_step is not None:
                on_step(log)
            if run_dir is not None and checkpoint_every and step % checkpoint_every == 0 and step < total_steps:
                path = run_dir / f"ckpt_{step}.bin"
                save_checkpoint(path, model, step)
                result.checkpoints.append(path)
        if run_dir is not None:
            path = run_dir / "final.bin"
            save_checkpoint(path, model, total_steps)
            result.checkpoints.append(path)
    finally:
        if metrics is not None:
            metrics.close()
    return result


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce a pre-training run besides the corpus."""

    total_steps: int = 1000
    variant: str = "presence"
    reweight: ReweightConfig = ReweightConfig()
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    adam: AdamConfig = AdamConfig()
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        rw = dict(d["reweight"])
        rw["layers"] = tuple(rw["layers"])
        return cls(total_steps=d["total_steps"], variant=d["variant"], reweight=ReweightConfig(**rw),
                   model=ModelConfig(**d["model"]), data=DataConfig(**d["data"]),
                   adam=AdamConfig(**d["adam"]), checkpoint_every=d.get("checkpoint_every", 0))


def train(cfg: TrainConfig, corpus: Sequence[Sample], run_dir: str | Path | None = None,
          manifest_extra: dict | None = None, on_step: Callable[[StepLog], None] | None = None) -> TrainResult:
    extra = {"train_config": cfg.to_dict()}
    extra.update(manifest_extra or {})
    return run_pretraining(cfg.reweight, cfg.model, corpus, cfg.total_steps, cfg.variant, cfg.data,
                           cfg.adam, run_dir=run_dir, checkpoint_every=cfg.checkpoint_every,
                           manifest_extra=extra, on_step=on_step)
