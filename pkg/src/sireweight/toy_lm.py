"""Tiny pre-LN encoder-decoder transformer with a span-corruption loss.

Layer ids are ``enc_emb`` (token + positional embeddings, shared by encoder
and decoder), ``enc_0 .. enc_{n-1}``, ``dec_0 .. dec_{m-1}`` and ``lm_head``.
The output projection is untied from the token embedding so that a layer
set such as ``{enc_0, dec_0}`` names a well-defined parameter block.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import grad_core as gc
from .data import Batch, Microbatch, Vocab, collate
from .grad_core import ParamStore, Tape, Var

CKPT_MAGIC = b"SIRW-CKPT v1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_input_len: int = 64
    max_target_len: int = 24
    seed: int = 0
    n_sentinels: int = 32
    loss_scale: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                     "max_input_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        Vocab(self.vocab_size, self.n_sentinels)  # validates room for specials

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.n_sentinels)

    def layer_ids(self) -> list[str]:
        return (["enc_emb"] + [f"enc_{i}" for i in range(self.n_enc_layers)]
                + [f"dec_{i}" for i in range(self.n_dec_layers)] + ["lm_head"])


def _manifest(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    out = [("enc_emb", "tok", (v, d)), ("enc_emb", "enc_pos", (cfg.max_input_len, d)),
           ("enc_emb", "dec_pos", (cfg.max_target_len, d))]
    ffn = [("w1", (d, f)), ("b1", (f,)), ("w2", (f, d)), ("b2", (d,))]
    for i in range(cfg.n_enc_layers):
        layer = f"enc_{i}"
        shapes = [("ln1_g", (d,)), ("ln1_b", (d,)), ("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)),
                  ("wo", (d, d)), ("ln2_g", (d,)), ("ln2_b", (d,))] + ffn
        if i == cfg.n_enc_layers - 1:
            shapes += [("final_g", (d,)), ("final_b", (d,))]
        out += [(layer, n, s) for n, s in shapes]
    for i in range(cfg.n_dec_layers):
        layer = f"dec_{i}"
        shapes = [("ln1_g", (d,)), ("ln1_b", (d,)), ("sq", (d, d)), ("sk", (d, d)), ("sv", (d, d)),
                  ("so", (d, d)), ("ln2_g", (d,)), ("ln2_b", (d,)), ("cq", (d, d)), ("ck", (d, d)),
                  ("cv", (d, d)), ("co", (d, d)), ("ln3_g", (d,)), ("ln3_b", (d,))] + ffn
        out += [(layer, n, s) for n, s in shapes]
    out += [("lm_head", "ln_g", (d,)), ("lm_head", "ln_b", (d,)), ("lm_head", "w", (d, v)),
            ("lm_head", "b", (v,))]
    return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    for layer, name, shape in _manifest(cfg):
        if name.endswith("_g"):
            value = np.ones(shape)
        elif name.endswith("_b") or name in ("b", "b1", "b2"):
            value = np.zeros(shape)
        else:
            value = _truncated_normal(rng, shape, 0.02)
        store.add(layer, name, value)
    return store


class ToyLM:
    """Model definition plus its current parameters.

    Every loss evaluation records onto a fresh :class:`Tape`; parameters are
    only read, never written, during a forward/backward pass.
    """

    def __init__(self, config: ModelConfig, params: ParamStore | None = None):
        self.config = config
        self.vocab = config.vocab
        self.params = params if params is not None else init_params(config)
        expected = [(layer, name) for layer, name, _ in _manifest(config)]
        if list(self.params.keys()) != expected:
            raise ValueError("parameter store does not match the model layout")

    @property
    def layer_ids(self) -> list[str]:
        return self.config.layer_ids()

    def new_tape(self, params: ParamStore | None = None) -> Tape:
        return Tape(self.params if params is None else params)

    # -- forward ---------------------------------------------------------

    def _check_batch(self, batch: Batch) -> None:
        cfg = self.config
        for name in ("enc_ids", "dec_in", "labels"):
            arr = getattr(batch, name)
            if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
                raise ValueError(f"{name}: token id outside vocab of size {cfg.vocab_size}")
        if batch.enc_ids.shape[1] > cfg.max_input_len:
            raise ValueError(f"input length {batch.enc_ids.shape[1]} exceeds max_input_len={cfg.max_input_len}")
        if batch.labels.shape[1] > cfg.max_target_len:
            raise ValueError(f"target length {batch.labels.shape[1]} exceeds max_target_len={cfg.max_target_len}")
        counts = batch.label_mask.sum(axis=1)
        if (counts == 0).any():
            raise ValueError("batch contains a sample with no supervised target positions")

    def _attention(self, tape: Tape, layer: str, names: tuple[str, str, str, str],
                   xq: Var, xkv: Var, mask: np.ndarray) -> Var:
        b, lq, d = xq.shape
        lk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h
        wq, wk, wv, wo = (tape.param(layer, n) for n in names)
        q = gc.transpose(gc.reshape(xq @ wq, (b, lq, h, dh)), (0, 2, 1, 3))
        kt = gc.transpose(gc.reshape(xkv @ wk, (b, lk, h, dh)), (0, 2, 3, 1))
        v = gc.transpose(gc.reshape(xkv @ wv, (b, lk, h, dh)), (0, 2, 1, 3))
        att = gc.masked_softmax(gc.scale(q @ kt, 1.0 / math.sqrt(dh)), mask)
        ctx = gc.reshape(gc.transpose(att @ v, (0, 2, 1, 3)), (b, lq, d))
        return ctx @ wo

    def _ffn(self, tape: Tape, layer: str, x: Var) -> Var:
        hid = gc.gelu(x @ tape.param(layer, "w1") + tape.param(layer, "b1"))
        return hid @ tape.param(layer, "w2") + tape.param(layer, "b2")

    def _ln(self, tape: Tape, layer: str, x: Var, g: str, b: str) -> Var:
        return gc.layer_norm(x, tape.param(layer, g), tape.param(layer, b))

    def logits(self, tape: Tape, batch: Batch) -> Var:
        self._check_batch(batch)
        cfg = self.config
        bsz, li = batch.enc_ids.shape
        lt = batch.dec_in.shape[1]
        pad = self.vocab.pad
        tok = tape.param("enc_emb", "tok")

        enc_keep = batch.enc_ids != pad
        enc_mask = enc_keep[:, None, None, :]
        x = gc.embedding(tok, batch.enc_ids) + gc.embedding(tape.param("enc_emb", "enc_pos"), np.arange(li))
        for i in range(cfg.n_enc_layers):
            layer = f"enc_{i}"
            hq = self._ln(tape, layer, x, "ln1_g", "ln1_b")
            x = x + self._attention(tape, layer, ("wq", "wk", "wv", "wo"), hq, hq, enc_mask)
            x = x + self._ffn(tape, layer, self._ln(tape, layer, x, "ln2_g", "ln2_b"))
        last = f"enc_{cfg.n_enc_layers - 1}"
        memory = self._ln(tape, last, x, "final_g", "final_b")

        causal = np.tril(np.ones((lt, lt), dtype=bool))[None, None]
        y = gc.embedding(tok, batch.dec_in) + gc.embedding(tape.param("enc_emb", "dec_pos"), np.arange(lt))
        for i in range(cfg.n_dec_layers):
            layer = f"dec_{i}"
            hq = self._ln(tape, layer, y, "ln1_g", "ln1_b")
            y = y + self._attention(tape, layer, ("sq", "sk", "sv", "so"), hq, hq, causal)
            hq = self._ln(tape, layer, y, "ln2_g", "ln2_b")
            y = y + self._attention(tape, layer, ("cq", "ck", "cv", "co"), hq, memory, enc_mask)
            y = y + self._ffn(tape, layer, self._ln(tape, layer, y, "ln3_g", "ln3_b"))
        y = self._ln(tape, "lm_head", y, "ln_g", "ln_b")
        out = y @ tape.param("lm_head", "w") + tape.param("lm_head", "b")
        assert out.shape == (bsz, lt, cfg.vocab_size)
        return out

    def loss_weights(self, batch: Batch) -> np.ndarray:
        """Token weights giving the mean over samples of each sample's token-mean loss."""
        mask = batch.label_mask.astype(np.float64)
        per_sample = mask.sum(axis=1, keepdims=True)
        return mask / per_sample / batch.size * self.config.loss_scale

    def record_loss(self, tape: Tape, batch: Batch) -> Var:
        logits = self.logits(tape, batch)
        loss = gc.softmax_cross_entropy(logits, batch.labels, self.loss_weights(batch))
        return tape.set_loss(loss)

    def loss(self, batch: Batch | Microbatch, params: ParamStore | None = None) -> float:
        tape = self.new_tape(params)
        return float(self.record_loss(tape, self._as_batch(batch)).value)

    def loss_and_grad(self, batch: Batch | Microbatch,
                      params: ParamStore | None = None) -> tuple[float, ParamStore]:
        tape = self.new_tape(params)
        loss = self.record_loss(tape, self._as_batch(batch))
        return float(loss.value), tape.backward()

    def _as_batch(self, batch) -> Batch:
        if isinstance(batch, Microbatch):
            return batch.collate(self.vocab)
        if isinstance(batch, Batch):
            return batch
        return collate(batch, self.vocab)

    def copy(self) -> "ToyLM":
        return ToyLM(self.config, self.params.copy())


def build_model(config: ModelConfig) -> ToyLM:
    return ToyLM(config)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, _, s in _manifest(config))


def span_corruption_loss(model: ToyLM, batch, params: ParamStore | None = None) -> float:
    return model.loss(batch, params)


def default_layer_set(model: ToyLM) -> frozenset[str]:
    """First encoder block and first decoder block."""
    if not isinstance(model, ToyLM):
        raise TypeError("default_layer_set needs a built ToyLM")
    return frozenset({"enc_0", "dec_0"})


def validate_layer_set(model: ToyLM, layers) -> frozenset[str]:
    layers = frozenset(layers)
    if not layers:
        raise ValueError("layer set must be non-empty")
    unknown = layers.difference(model.layer_ids)
    if unknown:
        raise gc.UnknownLayerError(f"unknown layer id(s): {sorted(unknown)}")
    return layers


# ---------------------------------------------------------------------------
# Checkpoints: magic line, one JSON header line, raw little-endian float64
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: ToyLM, step: int = 0, extra: dict | None = None) -> str:
    header = {
        "config": asdict(model.config),
        "manifest": [[layer, name, list(v.shape)] for (layer, name), v in model.params.items()],
        "step": int(step),
        "extra": extra or {},
    }
    blob = CKPT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + model.params.tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()[:16]


def load_checkpoint(path: str | Path) -> tuple[ToyLM, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = blob.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(blob[len(CKPT_MAGIC):end])
    raw = np.frombuffer(blob[end + 1:], dtype="<f8")
    cfg = ModelConfig(**header["config"])
    store = ParamStore()
    offset = 0
    for layer, name, shape in header["manifest"]:
        size = int(np.prod(shape))
        if offset + size > raw.size:
            raise ValueError(f"{path}: truncated parameter data")
        store.add(layer, name, raw[offset: offset + size].reshape(shape).astype(np.float64))
        offset += size
    if offset != raw.size:
        raise ValueError(f"{path}: {raw.size - offset} trailing values after manifest")
    header["id"] = hashlib.sha256(blob).hexdigest()[:16]
    return ToyLM(cfg, store), header
