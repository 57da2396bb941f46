"""TracIn influence and self-influence at sample, microbatch and dataset level.

All scores use a single checkpoint: the influence of ``z`` on ``z'`` is the
(layer-restricted) dot product of their loss gradients at the current
parameters, and self-influence is that product with ``z' = z``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .data import DataConfig, Example, Microbatch, Sample, corrupt_sample
from .grad_core import ParamStore, grad_dot
from .toy_lm import ToyLM, validate_layer_set


class ScoringError(RuntimeError):
    def __init__(self, index: int, sample_id: str, value: float):
        super().__init__(f"non-finite SI score {value!r} at index {index} (sample {sample_id})")
        self.index = index
        self.sample_id = sample_id


@dataclass
class ScoreArray:
    scores: np.ndarray
    normalized: bool = False
    epsilon: float = 1e-8

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, i):
        return self.scores[i]


def _example(model: ToyLM, z: Sample | Example, data_cfg: DataConfig) -> Example:
    if isinstance(z, Example):
        return z
    return corrupt_sample(z, data_cfg, model.vocab, epoch=0)


def gradient(model: ToyLM, items: Sequence[Sample | Example] | Microbatch,
             data_cfg: DataConfig = DataConfig(), params: ParamStore | None = None) -> ParamStore:
    """Gradient of the mean loss over ``items``."""
    if isinstance(items, Microbatch):
        examples = items.examples
    else:
        examples = [_example(model, z, data_cfg) for z in items]
    if not examples:
        raise ValueError("cannot take the gradient of an empty microbatch")
    _, g = model.loss_and_grad(examples, params)
    return g


def tracin_influence(model: ToyLM, z: Sample | Example, z_prime: Sample | Example, layers: Iterable[str],
                     data_cfg: DataConfig = DataConfig()) -> float:
    layers = validate_layer_set(model, layers)
    return grad_dot(gradient(model, [z], data_cfg), gradient(model, [z_prime], data_cfg), layers)


def self_influence(model: ToyLM, z: Sample | Example, layers: Iterable[str],
                   data_cfg: DataConfig = DataConfig()) -> float:
    layers = validate_layer_set(model, layers)
    g = gradient(model, [z], data_cfg)
    return grad_dot(g, g, layers)


def microbatch_si(model: ToyLM, b: Microbatch | Sequence[Sample | Example], layers: Iterable[str],
                  data_cfg: DataConfig = DataConfig()) -> float:
    """Self-influence of the gradient of the microbatch-mean loss."""
    layers = validate_layer_set(model, layers)
    g = gradient(model, b, data_cfg)
    return grad_dot(g, g, layers)


def score_dataset(model: ToyLM, dataset: Sequence[Sample], layers: Iterable[str],
                  data_cfg: DataConfig = DataConfig(), workers: int = 1,
                  progress: Callable[[int, int], None] | None = None) -> tuple[ScoreArray, list[str]]:
    """Raw SI score per sample, in input order, plus the aligned sample ids.

    Samples are scored one at a time; with ``workers > 1`` they are fanned out
    to threads but results are still written back by original index.
    """
    if not dataset:
        raise ValueError("cannot score an empty dataset")
    layers = validate_layer_set(model, layers)
    n = len(dataset)
    out = np.empty(n)

    def one(i: int) -> tuple[int, float]:
        return i, self_influence(model, dataset[i], layers, data_cfg)

    def store(i: int, value: float, done: int) -> None:
        if not math.isfinite(value):
            raise ScoringError(i, dataset[i].id, value)
        out[i] = value
        if progress is not None:
            progress(done, n)

    if workers <= 1:
        for i in range(n):
            store(*one(i), i + 1)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for done, (i, value) in enumerate(pool.map(one, range(n)), start=1):
                store(i, value, done)
    return ScoreArray(out), [s.id for s in dataset]


@dataclass(frozen=True)
class SIReport:
    n_clean: int
    n_other: int
    mean_clean: float
    mean_other: float
    std_clean: float
    std_other: float
    ratio: float
    welch_t: float
    welch_df: float
    p_value: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def si_report(clean_scores: ScoreArray, other_scores: ScoreArray) -> SIReport:
    """Compare mean SI of a reference group with another group.

    ``welch_t`` is positive when ``other`` has the larger mean; ``p_value`` is
    for the one-sided alternative mean(other) > mean(clean).
    """
    a = np.asarray(clean_scores.scores if isinstance(clean_scores, ScoreArray) else clean_scores, float)
    b = np.asarray(other_scores.scores if isinstance(other_scores, ScoreArray) else other_scores, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("si_report needs two non-empty score arrays")
    ma, mb = float(a.mean()), float(b.mean())
    va = float(a.var(ddof=1)) if a.size > 1 else 0.0
    vb = float(b.var(ddof=1)) if b.size > 1 else 0.0
    se2 = va / a.size + vb / b.size
    if se2 > 0:
        t = (mb - ma) / math.sqrt(se2)
        denom = 0.0
        if a.size > 1:
            denom += (va / a.size) ** 2 / (a.size - 1)
        if b.size > 1:
            denom += (vb / b.size) ** 2 / (b.size - 1)
        df = se2 ** 2 / denom if denom > 0 else float("inf")
        p = float(stats.t.sf(t, df))
    else:
        t = 0.0 if mb == ma else math.copysign(math.inf, mb - ma)
        df = float("nan")
        p = 0.5 if mb == ma else float(mb < ma)
    ratio = mb / ma if ma != 0 else (1.0 if mb == 0 else math.inf)
    return SIReport(a.size, b.size, ma, mb, math.sqrt(va), math.sqrt(vb), ratio, t, df, p)


# ---------------------------------------------------------------------------
# Score files: "#scores {json}" header, then "index<TAB>sample_id<TAB>score"
# ---------------------------------------------------------------------------

SCORES_MAGIC = "#scores "


def write_scores(path: str | Path, ids: Sequence[str], scores: ScoreArray, meta: dict | None = None) -> None:
    if len(ids) != len(scores):
        raise ValueError("ids and scores differ in length")
    lines = [SCORES_MAGIC + json.dumps(meta or {}, sort_keys=True)]
    lines += [f"{i}\t{sid}\t{float(s)!r}" for i, (sid, s) in enumerate(zip(ids, scores.scores))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path) -> tuple[ScoreArray, list[str], dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(SCORES_MAGIC):
        raise ValueError(f"{path}: missing scores header")
    meta = json.loads(lines[0][len(SCORES_MAGIC):])
    ids, vals = [], []
    for expected, line in enumerate(l for l in lines[1:] if l):
        idx, sid, val = line.split("\t")
        if int(idx) != expected:
            raise ValueError(f"{path}: index {idx} out of order (expected {expected})")
        ids.append(sid)
        vals.append(float(val))
    return ScoreArray(np.array(vals)), ids, meta
