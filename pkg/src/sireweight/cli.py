"""Command line entry point (``sirw``).

Failures print a single ``error[<kind>]: <message>`` line to stderr and exit
with status 2 (usage) or 1 (runtime).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .data import DataConfig, MixtureCounts, Vocab, build_mixture, read_corpus, write_corpus
from .experiments import eval_loss
from .filter import FilterSpec, filter_dataset, write_kept_manifest
from .influence import read_scores, score_dataset, si_report, write_scores, ScoreArray
from .reweight import AdamConfig, ReweightConfig, TrainConfig, canonical_variant, prepare_run_dir, train
from .toy_lm import ModelConfig, default_layer_set, load_checkpoint, save_checkpoint, validate_layer_set

RUN_ROOT_ENV = "SIRW_RUN_ROOT"
log = logging.getLogger("sirw")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print a multi-line usage block
        raise UsageError(message)


def _run_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_corpus(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return read_corpus(p)


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _positive(name: str):
    def conv(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _non_negative(name: str):
    def conv(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if v < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {v}")
        return v
    return conv


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    counts = MixtureCounts(args.clean, args.permuted, args.shifted)
    vocab = Vocab(args.vocab_size, args.n_sentinels)
    samples = build_mixture(counts, args.seed, args.seq_len, vocab)
    header = {
        "vocab_size": vocab.size,
        "n_sentinels": vocab.n_sentinels,
        "seed": args.seed,
        "seq_len": args.seq_len,
        "counts": asdict(counts),
        "generators": {"clean": "markov_A", "permuted": "markov_A+permute", "domain_shifted": "markov_B"},
        "code_version": __version__,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, samples, header)
    print(json.dumps({"corpus": str(out), "samples": len(samples), **header["counts"]}))
    return 0


def _train_config(args, corpus_header: dict) -> TrainConfig:
    variant = canonical_variant(args.variant)
    given = {k for k in ("tau1", "tau2", "switch_step") if getattr(args, k) is not None}
    forbidden = {
        "baseline": {"tau1", "tau2", "switch_step"},
        "presence_d": {"tau2", "switch_step"},
        "presence_i": {"tau1", "switch_step"},
    }.get(variant, set())
    clash = sorted(given & forbidden)
    if clash:
        flags = ", ".join("--" + c.replace("_", "-") for c in clash)
        raise UsageError(f"{flags} cannot be combined with --variant {args.variant}")
    switch = args.switch_step if args.switch_step is not None else args.steps // 2
    rw = ReweightConfig(
        tau1=1.0 if args.tau1 is None else args.tau1,
        tau2=-1.0 if args.tau2 is None else args.tau2,
        switch_step=switch,
        n_microbatches=args.microbatches,
        layers=tuple(args.layers.split(",")),
        weight_scale=args.weight_scale,
    )
    if args.minibatch % args.microbatches:
        raise UsageError(f"--minibatch {args.minibatch} is not divisible by --microbatches {args.microbatches}")
    model = ModelConfig(vocab_size=int(corpus_header["vocab_size"]),
                        n_sentinels=int(corpus_header.get("n_sentinels", 32)),
                        d_model=args.d_model, n_heads=args.heads, n_enc_layers=args.enc_layers,
                        n_dec_layers=args.dec_layers, seed=args.seed, loss_scale=args.loss_scale)
    return TrainConfig(total_steps=args.steps, variant=variant, reweight=rw, model=model,
                       data=DataConfig(minibatch_size=args.minibatch, seed=args.seed),
                       adam=AdamConfig(lr=args.lr, warmup_steps=args.warmup),
                       checkpoint_every=args.checkpoint_every)


def _progress(every: int):
    def hook(logrec):
        if every and logrec.step % every == 0:
            log.info("step %d tau %s loss %.4f", logrec.step, logrec.tau, logrec.minibatch_loss)
    return hook


def cmd_pretrain(args) -> int:
    header, corpus = _load_corpus(args.corpus)
    cfg = _train_config(args, header)
    run_dir = _run_path(args.run_dir)
    extra = {"corpus": {"path": str(Path(args.corpus).resolve()), "sha256": _sha256(Path(args.corpus))}}
    res = train(cfg, corpus, run_dir=run_dir, manifest_extra=extra, on_step=_progress(args.log_every))
    print(json.dumps({"run_dir": str(run_dir), "final_loss": res.logs[-1].minibatch_loss,
                      "checkpoint": str(res.checkpoints[-1])}))
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    cfg = TrainConfig.from_dict(manifest["train_config"])
    corpus_path = Path(args.corpus or manifest["corpus"]["path"])
    if _sha256(corpus_path) != manifest["corpus"]["sha256"]:
        raise ValueError(f"corpus {corpus_path} does not match the manifest's sha256")
    _, corpus = read_corpus(corpus_path)
    run_dir = _run_path(args.run_dir)
    extra = {k: v for k, v in manifest.items() if k == "corpus"}
    res = train(cfg, corpus, run_dir=run_dir, manifest_extra=extra)
    print(json.dumps({"run_dir": str(run_dir), "final_loss": res.logs[-1].minibatch_loss}))
    return 0


def cmd_score(args) -> int:
    model, ck = _load_ckpt(args.checkpoint)
    header, corpus = _load_corpus(args.corpus)
    if int(header["vocab_size"]) != model.config.vocab_size:
        raise ValueError(f"corpus vocab {header['vocab_size']} != model vocab {model.config.vocab_size}")
    layers = default_layer_set(model) if args.layers is None else validate_layer_set(model, args.layers.split(","))
    data = DataConfig(seed=args.seed)
    scores, ids = score_dataset(model, corpus, layers, data, workers=args.workers)
    meta = {"checkpoint": ck["id"], "corpus_sha256": _sha256(Path(args.corpus)),
            "layers": sorted(layers), "data_seed": args.seed}
    write_scores(args.out, ids, scores, meta)
    print(json.dumps({"scores": str(args.out), "count": len(ids)}))
    return 0


def cmd_filter(args) -> int:
    if not Path(args.scores).is_file():
        raise FileNotFoundError(f"scores file not found: {args.scores}")
    scores, ids, meta = read_scores(args.scores)
    spec = FilterSpec(args.keep, args.mode)
    kept = filter_dataset(scores, spec)
    write_kept_manifest(args.out, kept, scoring_checkpoint=meta.get("checkpoint", "unknown"),
                        mode=spec.mode, keep_count=spec.keep_count, total=len(ids))
    print(json.dumps({"manifest": str(args.out), "kept": len(kept), "total": len(ids)}))
    return 0


def cmd_si_report(args) -> int:
    if args.other is not None:
        clean, _, _ = read_scores(args.clean)
        other, _, _ = read_scores(args.other)
    else:
        if args.corpus is None or args.provenance is None:
            raise UsageError("give either --other SCORES or both --corpus and --provenance")
        scores, ids, _ = read_scores(args.clean)
        _, corpus = _load_corpus(args.corpus)
        prov = {s.id: s.provenance for s in corpus}
        clean = ScoreArray([v for i, v in zip(ids, scores.scores) if prov[i] == "clean"])
        other = ScoreArray([v for i, v in zip(ids, scores.scores) if prov[i] == args.provenance])
    rep = si_report(clean, other).as_dict()
    text = json.dumps(rep, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    model, ck = _load_ckpt(args.checkpoint)
    header, corpus = _load_corpus(args.corpus)
    if int(header["vocab_size"]) != model.config.vocab_size:
        raise ValueError(f"corpus vocab {header['vocab_size']} != model vocab {model.config.vocab_size}")
    loss = eval_loss(model, corpus, DataConfig(seed=args.seed))
    rec = {"checkpoint": ck["id"], "corpus": str(args.corpus), "samples": len(corpus), "mean_loss": loss}
    text = json.dumps(rec, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sequential(args) -> int:
    from .filter import sequential_pipeline

    header, corpus = _load_corpus(args.corpus)
    if args.keep > len(corpus):
        raise UsageError(f"--keep {args.keep} exceeds corpus size {len(corpus)}")
    args.variant, args.tau1, args.tau2, args.switch_step = "baseline", None, None, None
    cfg = _train_config(args, header)
    run_dir = prepare_run_dir(_run_path(args.run_dir))
    scorer_steps = args.scorer_steps or max(1, round(0.2 * args.steps))
    scorer = train(replace(cfg, total_steps=scorer_steps), corpus, run_dir=run_dir / "scorer")
    scorer_ckpt = run_dir / "scorer" / "final.bin"
    res = sequential_pipeline(corpus, scorer_ckpt, FilterSpec(args.keep, args.mode), cfg,
                              work_dir=run_dir, run_dir=run_dir / "final")
    del scorer
    print(json.dumps({"run_dir": str(run_dir), "kept": len(res.kept),
                      "checkpoint": str(res.train.checkpoints[-1])}))
    return 0


# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True)
    p.add_argument("--run-dir", required=True, help=f"relative paths resolve under ${RUN_ROOT_ENV} if set")
    p.add_argument("--steps", type=_positive("--steps"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--microbatches", type=_positive("--microbatches"), default=8)
    p.add_argument("--minibatch", type=_positive("--minibatch"), default=16)
    p.add_argument("--layers", default="enc_0,dec_0")
    p.add_argument("--weight-scale", choices=("paper_literal", "sum_preserving"), default="paper_literal")
    p.add_argument("--d-model", type=_positive("--d-model"), default=64)
    p.add_argument("--heads", type=_positive("--heads"), default=2)
    p.add_argument("--enc-layers", type=_positive("--enc-layers"), default=2)
    p.add_argument("--dec-layers", type=_positive("--dec-layers"), default=2)
    p.add_argument("--loss-scale", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=_non_negative("--warmup"), default=100)
    p.add_argument("--checkpoint-every", type=_non_negative("--checkpoint-every"), default=0)
    p.add_argument("--log-every", type=_non_negative("--log-every"), default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sirw", description="Self-influence filtering and microbatch reweighting.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic clean/permuted/shifted corpus")
    p.add_argument("--clean", type=_non_negative("--clean"), default=0)
    p.add_argument("--permuted", type=_non_negative("--permuted"), default=0)
    p.add_argument("--shifted", type=_non_negative("--shifted"), default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=_positive("--seq-len"), default=32)
    p.add_argument("--vocab-size", type=_positive("--vocab-size"), default=512)
    p.add_argument("--n-sentinels", type=_positive("--n-sentinels"), default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train a fresh model")
    _add_train_flags(p)
    p.add_argument("--variant", default="presence",
                   choices=("baseline", "presence", "presence-d", "presence-i", "presence-i-d"))
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--switch-step", type=_non_negative("--switch-step"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("replay", help="rerun a pre-training run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--corpus", help="override the corpus path recorded in the manifest")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("score", help="self-influence score every sample of a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma-separated layer ids (default enc_0,dec_0)")
    p.add_argument("--seed", type=int, default=0, help="span-corruption seed")
    p.add_argument("--workers", type=_positive("--workers"), default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="keep the N lowest (or highest) scoring samples")
    p.add_argument("--scores", required=True)
    p.add_argument("--keep", type=_positive("--keep"), required=True)
    p.add_argument("--mode", choices=("keep_lowest", "keep_highest"), default="keep_lowest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("si-report", help="compare mean SI of two groups")
    p.add_argument("--clean", required=True, help="scores file of the reference group (or of a whole corpus)")
    p.add_argument("--other", help="scores file of the other group")
    p.add_argument("--corpus", help="corpus used to split --clean by provenance")
    p.add_argument("--provenance", choices=("permuted", "domain_shifted"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_si_report)

    p = sub.add_parser("eval", help="mean held-out span-corruption loss")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=0, help="span-corruption seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sequential", help="train a scorer, filter by SI, pre-train on the kept set")
    _add_train_flags(p)
    p.add_argument("--keep", type=_positive("--keep"), required=True)
    p.add_argument("--mode", choices=("keep_lowest", "keep_highest"), default="keep_lowest")
    p.add_argument("--scorer-steps", type=_positive("--scorer-steps"),
                   help="scoring-model steps (default 20%% of --steps)")
    p.set_defaults(func=cmd_sequential)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FileExistsError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error[value]: {str(exc).splitlines()[0]}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"error[{type(exc).__name__}]: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
