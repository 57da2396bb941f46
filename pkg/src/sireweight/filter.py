"""Offline filtering of a corpus by self-influence rank.

Samples are ordered by ``(raw score, original index)``. ``keep_lowest``
keeps the first ``N`` of that order (the method); ``keep_highest`` keeps the
last ``N`` (the reverse-ranking ablation). Because both modes cut the same
total order, ``keep_lowest(N)`` and ``keep_highest(N' - N)`` partition the
corpus.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataConfig, Sample
from .influence import ScoreArray, read_scores, score_dataset, write_scores
from .reweight import TrainConfig, TrainResult, train
from .toy_lm import ToyLM, default_layer_set, load_checkpoint

MODES = ("keep_lowest", "keep_highest")
KEPT_MAGIC = "#kept "


@dataclass(frozen=True)
class FilterSpec:
    keep_count: int
    mode: str = "keep_lowest"

    def __post_init__(self):
        if self.keep_count < 1:
            raise ValueError("keep_count must be a positive integer")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def filter_dataset(scores: ScoreArray | Sequence[float], spec: FilterSpec) -> list[int]:
    """Indices kept by ``spec``, sorted ascending."""
    x = scores.scores if isinstance(scores, ScoreArray) else np.asarray(scores, dtype=np.float64)
    n_total = x.size
    if spec.keep_count > n_total:
        raise ValueError(f"keep_count {spec.keep_count} exceeds dataset size {n_total}")
    order = np.lexsort((np.arange(n_total), x))
    kept = order[: spec.keep_count] if spec.mode == "keep_lowest" else order[n_total - spec.keep_count:]
    return sorted(int(i) for i in kept)


def write_kept_manifest(path: str | Path, kept: Sequence[int], *, scoring_checkpoint: str,
                        mode: str, keep_count: int, total: int) -> None:
    header = {"scoring_checkpoint": scoring_checkpoint, "mode": mode, "N": keep_count, "N_prime": total}
    lines = [KEPT_MAGIC + json.dumps(header, sort_keys=True)] + [str(i) for i in kept]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kept_manifest(path: str | Path) -> tuple[list[int], dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(KEPT_MAGIC):
        raise ValueError(f"{path}: missing kept-index header")
    header = json.loads(lines[0][len(KEPT_MAGIC):])
    kept = [int(l) for l in lines[1:] if l]
    if len(kept) != header["N"]:
        raise ValueError(f"{path}: header says N={header['N']} but lists {len(kept)} indices")
    return kept, header


def apply_manifest(corpus: Sequence[Sample], kept: Sequence[int]) -> list[Sample]:
    return [corpus[i] for i in kept]


@dataclass
class SequentialResult:
    kept: list[int]
    scores: ScoreArray
    train: TrainResult


def sequential_pipeline(raw_corpus: Sequence[Sample], scoring_checkpoint: str | Path | ToyLM,
                        spec: FilterSpec, pretrain: TrainConfig, work_dir: str | Path,
                        data_config: DataConfig | None = None, run_dir: str | Path | None = None) -> SequentialResult:
    """Score, filter, then pre-train a fresh model on the kept subset.

    The score pass writes ``scores.tsv`` and the filter pass reads it back, so
    the two stages only share that file. ``kept.txt`` records the kept indices.
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(scoring_checkpoint, ToyLM):
        scorer, ckpt_id = scoring_checkpoint, "in-memory"
    else:
        scorer, header = load_checkpoint(scoring_checkpoint)
        ckpt_id = header["id"]
    data_config = data_config or pretrain.data
    scores, ids = score_dataset(scorer, raw_corpus, default_layer_set(scorer), data_config)
    score_path = work_dir / "scores.tsv"
    write_scores(score_path, ids, scores, {"checkpoint": ckpt_id})

    scores, ids, _ = read_scores(score_path)
    kept = filter_dataset(scores, spec)
    write_kept_manifest(work_dir / "kept.txt", kept, scoring_checkpoint=ckpt_id, mode=spec.mode,
                        keep_count=spec.keep_count, total=len(raw_corpus))
    result = train(pretrain, apply_manifest(raw_corpus, kept), run_dir=run_dir)
    return SequentialResult(kept, scores, result)
