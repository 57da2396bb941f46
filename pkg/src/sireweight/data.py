"""Synthetic corpora, span corruption and deterministic batching.

Text is stood in for by an order-2 Markov chain over the ordinary (non
special) token ids. Two chains with different transition seeds play the
roles of in-domain and domain-shifted text; permuting a sample's positions
gives a "noisy" sample with the same token multiset.
"""

from __future__ import annotations

import json
import zlib
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROVENANCES = ("clean", "permuted", "domain_shifted")
GENERATOR_SEEDS = {"markov_A": 1001, "markov_B": 2002}


@dataclass(frozen=True)
class Vocab:
    """Id layout: 0 pad, 1 eos, then ``n_sentinels`` sentinels, then ordinary tokens."""

    size: int = 512
    n_sentinels: int = 32

    pad: int = field(default=0, init=False)
    eos: int = field(default=1, init=False)

    def __post_init__(self):
        if self.n_sentinels < 1 or self.size <= 2 + self.n_sentinels:
            raise ValueError(
                f"vocab of size {self.size} cannot hold pad, eos and {self.n_sentinels} sentinels"
            )

    def sentinel(self, k: int) -> int:
        if not 0 <= k < self.n_sentinels:
            raise ValueError(f"sentinel index {k} out of range")
        return 2 + k

    @property
    def first_token(self) -> int:
        return 2 + self.n_sentinels

    @property
    def n_ordinary(self) -> int:
        return self.size - self.first_token

    def is_sentinel(self, tok: int) -> bool:
        return 2 <= tok < 2 + self.n_sentinels


@dataclass
class Sample:
    id: str
    token_ids: np.ndarray
    provenance: str = "clean"

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or self.token_ids.size == 0:
            raise ValueError(f"sample {self.id}: token_ids must be a non-empty 1-D sequence")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class Example:
    """A span-corrupted sample: encoder input and decoder target (no eos)."""

    sample_id: str
    inputs: np.ndarray
    targets: np.ndarray


@dataclass
class Batch:
    """Padded arrays for one forward pass."""

    enc_ids: np.ndarray
    dec_in: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]


class Microbatch:
    def __init__(self, examples: Sequence[Example]):
        if not examples:
            raise ValueError("empty microbatch")
        self.examples = list(examples)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.examples]

    def collate(self, vocab: Vocab) -> Batch:
        return collate(self.examples, vocab)


class Minibatch:
    def __init__(self, microbatches: Sequence[Microbatch]):
        sizes = {len(m) for m in microbatches}
        if len(sizes) != 1:
            raise ValueError(f"microbatches must have equal sizes, got {sorted(sizes)}")
        self.microbatches = list(microbatches)

    def __len__(self) -> int:
        return sum(len(m) for m in self.microbatches)

    @property
    def n_microbatches(self) -> int:
        return len(self.microbatches)

    @property
    def sample_ids(self) -> list[str]:
        return [i for m in self.microbatches for i in m.sample_ids]


def collate(examples: Sequence[Example], vocab: Vocab) -> Batch:
    """Append eos, shift targets right for teacher forcing, pad to the batch max."""
    if not examples:
        raise ValueError("cannot collate an empty example list")
    enc = [np.append(e.inputs, vocab.eos) for e in examples]
    lab = [np.append(e.targets, vocab.eos) for e in examples]
    li = max(len(x) for x in enc)
    lt = max(len(x) for x in lab)
    b = len(examples)
    enc_ids = np.full((b, li), vocab.pad, dtype=np.int64)
    labels = np.full((b, lt), vocab.pad, dtype=np.int64)
    dec_in = np.full((b, lt), vocab.pad, dtype=np.int64)
    mask = np.zeros((b, lt), dtype=bool)
    for i, (x, y) in enumerate(zip(enc, lab)):
        enc_ids[i, : len(x)] = x
        labels[i, : len(y)] = y
        dec_in[i, 1: len(y)] = y[:-1]
        mask[i, : len(y)] = True
    return Batch(enc_ids, dec_in, labels, mask)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "markov_A"
    order: int = 2
    transition_seed: int | None = None
    seq_len: int = 60
    branching: int = 4
    vocab_size: int = 512
    n_sentinels: int = 32

    def __post_init__(self):
        if self.kind not in GENERATOR_SEEDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.order != 2:
            raise ValueError("only order-2 chains are supported")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.transition_seed is None:
            object.__setattr__(self, "transition_seed", GENERATOR_SEEDS[self.kind])

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.n_sentinels)

    @property
    def provenance(self) -> str:
        return "clean" if self.kind == "markov_A" else "domain_shifted"


class MarkovChain:
    """Order-2 chain with a sparse successor set per previous token.

    ``P(c | a, b)`` puts mass only on ``succ[b]``; the token before ``b``
    rotates part of that mass, which is what makes the chain order 2.
    """

    MIX = 0.7

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        vocab = spec.vocab
        n, k = vocab.n_ordinary, spec.branching
        rng = np.random.default_rng(spec.transition_seed)
        self.succ = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
        base = rng.dirichlet(np.ones(k), size=n)
        self.base = -np.sort(-base, axis=1)
        self.offset = vocab.first_token

    def probs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Successor probabilities, shape ``(len(b), branching)``, aligned with ``succ[b]``."""
        k = self.spec.branching
        base = self.base[b]
        idx = (np.arange(k)[None, :] - (a % k)[:, None]) % k
        rolled = np.take_along_axis(base, idx, axis=1)
        return self.MIX * base + (1.0 - self.MIX) * rolled

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        n, length = self.spec.vocab.n_ordinary, self.spec.seq_len
        out = np.empty((count, length), dtype=np.int64)
        out[:, :2] = rng.integers(0, n, size=(count, 2))
        for t in range(2, length):
            a, b = out[:, t - 2], out[:, t - 1]
            cum = np.cumsum(self.probs(a, b), axis=1)
            u = rng.random(count)[:, None]
            choice = np.minimum((u >= cum).sum(axis=1), self.spec.branching - 1)
            out[:, t] = self.succ[b, choice]
        return out + self.offset


def gen_corpus(spec: GeneratorSpec, count: int, seed: int) -> list[Sample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    chain = MarkovChain(spec)
    seqs = chain.sample(count, np.random.default_rng(seed))
    return [Sample(f"{spec.kind}-{seed}-{i}", seqs[i], spec.provenance) for i in range(count)]


def permute_tokens(sample: Sample, seed: int) -> Sample:
    n = sample.token_ids.size
    if n < 2:
        raise ValueError("cannot permute a sample with fewer than 2 tokens")
    rng = np.random.default_rng(seed)
    ident = np.arange(n)
    perm = rng.permutation(n)
    while np.array_equal(perm, ident):
        perm = rng.permutation(n)
    return Sample(f"{sample.id}~perm", sample.token_ids[perm], "permuted")


def bigram_table(samples: Sequence[Sample], vocab_size: int) -> np.ndarray:
    """Empirical joint bigram distribution, shape ``(V, V)``."""
    counts = np.zeros((vocab_size, vocab_size))
    for s in samples:
        t = s.token_ids
        np.add.at(counts, (t[:-1], t[1:]), 1.0)
    return counts / counts.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


@dataclass(frozen=True)
class MixtureCounts:
    clean: int
    permuted: int = 0
    shifted: int = 0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} count must be non-negative")
        if self.total == 0:
            raise ValueError("mixture is empty")

    @property
    def total(self) -> int:
        return self.clean + self.permuted + self.shifted


def build_mixture(counts: MixtureCounts, seed: int, seq_len: int = 60,
                  vocab: Vocab = Vocab()) -> list[Sample]:
    """Clean, permuted and domain-shifted samples, shuffled together.

    Permuted samples come from their own fresh clean originals, which are not
    themselves part of the corpus.
    """
    out: list[Sample] = []
    spec_a = GeneratorSpec("markov_A", seq_len=seq_len, vocab_size=vocab.size,
                           n_sentinels=vocab.n_sentinels)
    n_a = counts.clean + counts.permuted
    if n_a:
        base = gen_corpus(spec_a, n_a, seed)
        out.extend(base[: counts.clean])
        for i, s in enumerate(base[counts.clean:]):
            out.append(permute_tokens(s, _derive_seed(seed, s.id, 1)))
    if counts.shifted:
        spec_b = GeneratorSpec("markov_B", seq_len=seq_len, vocab_size=vocab.size,
                               n_sentinels=vocab.n_sentinels)
        out.extend(gen_corpus(spec_b, counts.shifted, seed + 7919))
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(out))
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# Span corruption
# ---------------------------------------------------------------------------


def _composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random split of ``total`` into ``parts`` positive integers."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]]))


def span_corrupt(tokens: np.ndarray, rate: float, mean_span: float, seed,
                 vocab: Vocab = Vocab()) -> tuple[np.ndarray, np.ndarray]:
    """Replace random spans by sentinels.

    Returns ``(inputs, targets)``: inputs keep the unmasked tokens with one
    sentinel per span, targets list each sentinel followed by the tokens it
    hid. Spans never touch each other.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError("corruption rate must lie in (0, 1)")
    if mean_span < 1.0:
        raise ValueError("mean_span must be >= 1")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    if n < 2:
        raise ValueError(f"sequence of length {n} is too short to place a span")
    rng = np.random.default_rng(seed)
    n_noise = min(max(int(round(n * rate)), 1), n)
    if n_noise == n:
        s0 = vocab.sentinel(0)
        return np.array([s0]), np.concatenate([[s0], tokens])
    n_keep = n - n_noise
    n_spans = max(1, int(round(n_noise / mean_span)))
    n_spans = min(n_spans, n_noise, n_keep + 1, vocab.n_sentinels)
    noise_len = _composition(n_noise, n_spans, rng)
    # n_spans + 1 gaps; inner gaps >= 1 so spans are never adjacent, outer ones may be 0
    gaps = _composition(n_keep + 2, n_spans + 1, rng)
    gaps[0] -= 1
    gaps[-1] -= 1
    inputs: list[np.ndarray] = []
    targets: list[np.ndarray] = []
    pos = 0
    for k in range(n_spans):
        inputs.append(tokens[pos: pos + gaps[k]])
        pos += gaps[k]
        s = vocab.sentinel(k)
        inputs.append(np.array([s]))
        targets.append(np.array([s]))
        targets.append(tokens[pos: pos + noise_len[k]])
        pos += noise_len[k]
    inputs.append(tokens[pos:])
    return np.concatenate(inputs), np.concatenate(targets)


def _derive_seed(seed: int, sample_id: str, epoch: int) -> list[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(sample_id.encode()), int(epoch)]


@dataclass(frozen=True)
class DataConfig:
    minibatch_size: int = 16
    corruption_rate: float = 0.15
    mean_span: float = 3.0
    seed: int = 0


def corrupt_sample(sample: Sample, cfg: DataConfig, vocab: Vocab, epoch: int = 0) -> Example:
    """Deterministic corruption of ``sample``; epoch 0 is the scoring/eval view."""
    inputs, targets = span_corrupt(sample.token_ids, cfg.corruption_rate, cfg.mean_span,
                                   _derive_seed(cfg.seed, sample.id, epoch), vocab)
    return Example(sample.id, inputs, targets)


def batch_iterator(corpus: Sequence[Sample], minibatch_size: int, n_microbatches: int,
                   seed: int, epochs: int | None = 1, cfg: DataConfig | None = None,
                   vocab: Vocab = Vocab()) -> Iterator[Minibatch]:
    """Seeded per-epoch shuffle, drop-remainder minibatches of equal microbatches.

    ``epochs=None`` streams forever. Corruption is redrawn each epoch.
    """
    if n_microbatches < 1 or minibatch_size < 1 or minibatch_size % n_microbatches:
        raise ValueError(
            f"minibatch size {minibatch_size} is not divisible into {n_microbatches} microbatches"
        )
    if len(corpus) < minibatch_size:
        raise ValueError(f"corpus of {len(corpus)} samples cannot fill a minibatch of {minibatch_size}")
    cfg = cfg or DataConfig(minibatch_size=minibatch_size, seed=seed)
    micro = minibatch_size // n_microbatches
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([int(seed) & 0xFFFFFFFF, epoch, 0xB47C]).permutation(len(corpus))
        for start in range(0, len(order) - minibatch_size + 1, minibatch_size):
            chunk = [corpus[i] for i in order[start: start + minibatch_size]]
            examples = [corrupt_sample(s, cfg, vocab, epoch) for s in chunk]
            yield Minibatch([Microbatch(examples[j: j + micro]) for j in range(0, minibatch_size, micro)])
        epoch += 1


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------

CORPUS_MAGIC = "#corpus "


def write_corpus(path: str | Path, samples: Sequence[Sample], header: dict) -> None:
    lines = [CORPUS_MAGIC + json.dumps(header, sort_keys=True)]
    for s in samples:
        if "\t" in s.id or "\n" in s.id:
            raise ValueError(f"sample id {s.id!r} contains a tab or newline")
        lines.append(f"{s.id}\t{s.provenance}\t{' '.join(map(str, s.token_ids.tolist()))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path: str | Path) -> tuple[dict, list[Sample]]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(CORPUS_MAGIC):
        raise ValueError(f"{path}: missing corpus header")
    header = json.loads(text[0][len(CORPUS_MAGIC):])
    vocab_size = int(header["vocab_size"])
    samples = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line:
            continue
        sid, prov, toks = line.split("\t")
        ids = np.array([int(t) for t in toks.split()], dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise ValueError(f"{path}:{lineno}: token id outside vocab of size {vocab_size}")
        samples.append(Sample(sid, ids, prov))
    return header, samples
