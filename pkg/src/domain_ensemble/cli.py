"""Command-line entry point: ``domain-ensemble <subcommand> ...``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Every subcommand prints one JSON object on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bleu import corpus_bleu
from .config import ConfigError, load_config
from .corpus import (CorpusFormatError, ParallelCorpus, Sentence, Vocabulary, apply_bpe, build_vocab, load_mono,
                     load_parallel, train_bpe, write_parallel)
from .decoder import beam_decode, decode_corpus, trajectory_tsv
from .ensemble import SCHEMES, LambdaMatrix, estimate_lambda, make_spec
from .ngram import read_arpa, train_ngram, write_arpa
from .seqmodel import TableModel, ToyNeuralModel, load_model
from .synth import SynthConfig, generate, write_domains
from .training import (MODES, NumericalError, RegularizerConfig, estimate_fisher_diagonal, fine_tune, perplexity,
                       train_epochs)

log = logging.getLogger("domain_ensemble")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_pairs(path, src_vocab: Vocabulary, tgt_vocab: Vocabulary | None = None):
    corpus, _ = load_parallel(path, min_len=0, max_len=10**9, max_ratio=float("inf"))
    if tgt_vocab is None:
        return corpus, [src_vocab.encode(s.tokens) for s in corpus.sources]
    return corpus, [(src_vocab.encode(s.tokens), tgt_vocab.encode(t.tokens)) for s, t in corpus.pairs]


def _read_sources(path, vocab: Vocabulary):
    """Source sentences from a parallel TSV (left column) or a plain text file."""
    first = Path(path).read_text(encoding="utf-8").split("\n", 1)[0]
    if "\t" in first:
        _, ids = _read_pairs(path, vocab)
        return ids
    return [vocab.encode(s.tokens) for s in load_mono(path)]


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(a) -> dict:
    cfg = SynthConfig(seed=a.seed, n_domains=a.n_domains, n_slots=a.n_slots, words_per_slot=a.words_per_slot,
                      overlap=a.overlap, ambiguity=a.ambiguity, noise=a.noise, min_len=a.min_len,
                      n_train=a.n_train, n_valid=a.n_valid, n_test=a.n_test)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    data = generate(cfg)
    paths = write_domains(data, a.out_dir, cfg)
    return {"files": [str(p) for p in paths], "domains": list(data),
            "sizes": {d: {s: len(c) for s, c in splits.items()} for d, splits in data.items()}}


def cmd_prepare(a) -> dict:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loaded, reports = {}, {}
    for path in a.inputs:
        corpus, report = load_parallel(path, a.min_len, a.max_len, a.max_ratio)
        loaded[path] = corpus
        reports[Path(path).name] = {"kept": report.kept, "dropped": report.dropped}
    train = [loaded[p] for p in (a.train or a.inputs)]
    if a.bpe_merges > 0:
        src_bpe = train_bpe([s for c in train for s in c.sources], a.bpe_merges)
        tgt_bpe = train_bpe([t for c in train for t in c.targets], a.bpe_merges)
        src_bpe.save(out / "bpe.src.codes")
        tgt_bpe.save(out / "bpe.tgt.codes")
        loaded = {p: ParallelCorpus(tuple((apply_bpe(src_bpe, s), apply_bpe(tgt_bpe, t)) for s, t in c.pairs), c.domain_tag)
                  for p, c in loaded.items()}
        train = [loaded[p] for p in (a.train or a.inputs)]
    for path, corpus in loaded.items():
        write_parallel(out / Path(path).name, corpus)
    src_vocab = build_vocab([c.sources for c in train], a.min_count)
    tgt_vocab = build_vocab([c.targets for c in train], a.min_count)
    src_vocab.save(out / "vocab.src.txt")
    tgt_vocab.save(out / "vocab.tgt.txt")
    return {"files": reports, "src_vocab_size": len(src_vocab), "tgt_vocab_size": len(tgt_vocab),
            "bpe_merges": a.bpe_merges}


def cmd_train_lm(a) -> dict:
    vocab = Vocabulary.load(a.vocab)
    sents = _read_sources(a.data, vocab)
    lm = train_ngram(sents, a.order, len(vocab), a.discount)
    write_arpa(lm, a.out, vocab)
    return {"out": a.out, "order": lm.order, "sentences": len(sents),
            "ngrams": [len(p) and sum(len(v) for v in p.values()) for p in lm.probs[1:]]}


def cmd_train_model(a) -> dict:
    src_vocab, tgt_vocab = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    _, pairs = _read_pairs(a.data, src_vocab, tgt_vocab)
    if a.kind == "table":
        model = TableModel.train(pairs, len(tgt_vocab))
        model.save(a.out)
    else:
        init = ToyNeuralModel(len(src_vocab), len(tgt_vocab), a.src_dim, a.tgt_dim, a.hidden, seed=a.seed)
        model, trace = train_epochs(init, pairs, a.epochs, batch_size=a.batch_size, learning_rate=a.lr, seed=a.seed)
        model.save(a.out, src_vocab.tokens, tgt_vocab.tokens)
        if a.trace:
            trace.write_csv(a.trace)
    ppl = perplexity(model, pairs)
    if not np.isfinite(ppl):
        raise NumericalError("training perplexity is not finite")
    return {"out": a.out, "kind": a.kind, "train_perplexity": ppl}


def cmd_fine_tune(a) -> dict:
    src_vocab, tgt_vocab = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    model = load_model(a.model, src_vocab.tokens, tgt_vocab.tokens)
    if not isinstance(model, ToyNeuralModel):
        raise UsageError("fine-tune needs a neural model checkpoint")
    _, pairs = _read_pairs(a.data, src_vocab, tgt_vocab)
    reg = RegularizerConfig()
    fisher_samples = None
    if a.mode == "l2":
        reg = RegularizerConfig("l2", a.strength, model.theta.copy())
    elif a.mode == "ewc":
        if not a.old_data:
            raise UsageError("--mode ewc needs --old-data for the Fisher estimate")
        _, old = _read_pairs(a.old_data, src_vocab, tgt_vocab)
        fisher = estimate_fisher_diagonal(model, old, a.fisher_samples or None, np.random.default_rng(a.seed))
        fisher_samples = fisher.samples
        reg = RegularizerConfig("ewc", a.strength, model.theta.copy(), fisher.values)
    out, trace = fine_tune(model, pairs, reg, a.steps, a.lr, a.batch_size, a.seed)
    out.save(a.out, src_vocab.tokens, tgt_vocab.tokens)
    if a.trace:
        trace.write_csv(a.trace)
    return {"out": a.out, "mode": a.mode, "strength": a.strength, "steps": a.steps, "fisher_samples": fisher_samples,
            "final_loss": trace.loss[-1] if trace.loss else None, "train_perplexity": perplexity(out, pairs)}


def cmd_estimate_lambda(a) -> dict:
    if len(a.lm) != len(a.valid):
        raise UsageError("give one --valid file per --lm")
    vocab = Vocabulary.load(a.vocab)
    lms = [read_arpa(p, vocab) for p in a.lm]
    valid = [_read_sources(p, vocab) for p in a.valid]
    names = a.names.split(",") if a.names else [Path(p).stem for p in a.lm]
    lam = estimate_lambda(lms, valid, normalize=not a.raw, names=names)
    Path(a.out).write_text(lam.to_tsv())
    return {"out": a.out, "lambda": lam.values.tolist(), "normalized": not a.raw}


def _build_spec(a, src_vocab, tgt_vocab):
    models = [load_model(p, src_vocab.tokens, tgt_vocab.tokens) for p in a.model]
    lms = [read_arpa(p, src_vocab) for p in (a.lm or [])]
    lam = LambdaMatrix.from_tsv(Path(a.lambda_file).read_text()) if a.lambda_file else None
    if a.scheme in ("is", "bi_is") and len(lms) != len(models):
        raise UsageError(f"scheme {a.scheme} needs one --lm per model")
    if a.scheme in ("bi", "bi_is") and lam is None:
        raise UsageError(f"scheme {a.scheme} needs --lambda")
    return make_spec(a.scheme, models, lms, lam)


def _max_len(a, x) -> int:
    return a.max_len if a.max_len else 2 * len(x) + 2


def cmd_decode(a) -> dict:
    src_vocab, tgt_vocab = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    spec = _build_spec(a, src_vocab, tgt_vocab)
    sources = _read_sources(a.input, src_vocab)
    if a.max_len:
        results = decode_corpus(spec, sources, a.beam, a.max_len, a.workers)
    else:
        results = [None] * len(sources)
        groups: dict[int, list[int]] = {}
        for i, x in enumerate(sources):
            groups.setdefault(_max_len(a, x), []).append(i)
        for ml, idx in sorted(groups.items()):
            for i, r in zip(idx, decode_corpus(spec, [sources[i] for i in idx], a.beam, ml, a.workers)):
                results[i] = r
    with open(a.out, "w", encoding="utf-8") as f:
        for r in results:
            f.write(" ".join(tgt_vocab.decode(r.tokens)) + "\n")
    return {"out": a.out, "scheme": a.scheme, "sentences": len(results),
            "unfinished": sum(not r.finished for r in results)}


def cmd_trajectory(a) -> dict:
    src_vocab, tgt_vocab = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    spec = _build_spec(a, src_vocab, tgt_vocab)
    x = src_vocab.encode(Sentence.from_text(a.sentence).tokens)
    res = beam_decode(spec, x, a.beam, _max_len(a, x))
    Path(a.out).write_text(trajectory_tsv(res, tgt_vocab.tokens))
    return {"out": a.out, "translation": " ".join(tgt_vocab.decode(res.tokens)), "score": res.score,
            "finished": res.finished}


def cmd_evaluate(a) -> dict:
    hyps = [line.split() for line in Path(a.hyp).read_text(encoding="utf-8").split("\n")[:-1]]
    first = Path(a.ref).read_text(encoding="utf-8").split("\n", 1)[0]
    if "\t" in first:
        corpus, _ = load_parallel(a.ref, min_len=0, max_len=10**9, max_ratio=float("inf"))
        refs = [t.tokens for t in corpus.targets]
    else:
        refs = [s.tokens for s in load_mono(a.ref)]
    return corpus_bleu(hyps, refs).to_dict()


def cmd_run_experiment(a) -> dict:
    from .experiment import run_experiment

    cfg = load_config(a.config, a.set)
    summary = run_experiment(cfg, a.out_dir)
    return {"out_dir": a.out_dir, "mean_bleu": summary["mean_bleu"]}


# --------------------------------------------------------------------------
# argument parsing


def _decode_args(p) -> None:
    p.add_argument("--model", action="append", required=True, help="checkpoint; repeat once per ensemble member")
    p.add_argument("--scheme", choices=SCHEMES, default="bi")
    p.add_argument("--lm", action="append", help="source ARPA LM per task, in model order")
    p.add_argument("--lambda", dest="lambda_file", help="lambda TSV from estimate-lambda")
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=0, help="0 means 2 * source length + 2")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="domain-ensemble", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate seeded synthetic domains")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    d = SynthConfig(seed=0)
    for name in ("n_domains", "n_slots", "words_per_slot", "min_len", "n_train", "n_valid", "n_test"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name))
    for name in ("overlap", "ambiguity", "noise"):
        p.add_argument("--" + name, type=float, default=getattr(d, name))
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("prepare", help="filter parallel files, learn BPE, build vocabularies")
    p.add_argument("inputs", nargs="+", help="tab-separated parallel files")
    p.add_argument("--train", action="append", help="subset of inputs to learn BPE and vocabularies from")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bpe-merges", type=int, default=0)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=120)
    p.add_argument("--max-ratio", type=float, default=4.5)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-lm", help="train a source-side n-gram LM")
    p.add_argument("--data", required=True, help="parallel TSV (source side used) or plain text")
    p.add_argument("--vocab", required=True)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--discount", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train-model", help="train a next-token translation model")
    p.add_argument("--data", required=True)
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--kind", choices=("neural", "table"), default="neural")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--src-dim", type=int, default=32)
    p.add_argument("--tgt-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="optional CSV loss trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("fine-tune", help="continue training with no regularization, L2 or EWC")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="new-domain training pairs")
    p.add_argument("--old-data", help="old-domain pairs for the Fisher estimate (ewc)")
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--mode", choices=MODES, default="none")
    p.add_argument("--lambda", dest="strength", type=float, default=0.0, help="regularization strength")
    p.add_argument("--steps", type=int, default=750)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--fisher-samples", type=int, default=0, help="0 uses every old-domain token")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="CSV of step, loss, penalty")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("estimate-lambda", help="domain-task weights from source LMs and validation sets")
    p.add_argument("--lm", action="append", required=True)
    p.add_argument("--valid", action="append", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--names", help="comma-separated task names")
    p.add_argument("--raw", action="store_true", help="sum raw sentence probabilities instead of per-token ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_lambda)

    p = sub.add_parser("decode", help="translate with an ensemble")
    _decode_args(p)
    p.add_argument("--input", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("trajectory", help="decode one sentence and write its weight trajectory TSV")
    _decode_args(p)
    p.add_argument("--sentence", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, help="parallel TSV (target side used) or plain text")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-experiment", help="full pipeline on synthetic or file-based domains")
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(args.func(args))
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusFormatError, OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
