"""End-to-end experiment: train domain models, fine-tune with each regularizer,
decode with each ensembling scheme, and collect BLEU / perplexity tables.

All randomness is derived from the experiment seed through named streams
(see `substream`), so two runs with the same config write identical files.
Wall-clock timings go to ``timing.json``, which is the only file allowed to
differ between runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bleu import corpus_bleu
from .config import ExperimentConfig
from .corpus import ParallelCorpus, Vocabulary, apply_bpe, build_vocab, load_parallel, train_bpe
from .decoder import beam_decode, decode_corpus, trajectory_tsv
from .ensemble import SCHEMES, LambdaMatrix, estimate_lambda, make_spec
from .ngram import NgramLm, source_task_posterior, train_ngram, write_arpa
from .seqmodel import TableModel, ToyNeuralModel
from .synth import SPLITS, SynthConfig, domain_name, generate, make_probes, write_domains
from .training import RegularizerConfig, estimate_fisher_diagonal, perplexity, train_epochs

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "init": 1, "fisher": 2, "shuffle": 3}
REGIMES = ("none", "l2", "ewc")
TIMING_FILE = "timing.json"


def substream(seed: int, name: str, *extra: int) -> int:
    """Integer seed for the named random stream of an experiment seed."""
    return int(np.random.SeedSequence([seed, STREAMS[name], *extra]).generate_state(1)[0])


@dataclass
class World:
    """Everything one seed's experiment shares: data, vocabularies, source LMs, lambda."""

    names: list[str]
    raw: dict[str, dict[str, ParallelCorpus]]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    ids: dict[str, dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]]]
    lms: list[NgramLm]
    lam: LambdaMatrix

    def sources(self, name: str, split: str):
        return [x for x, _ in self.ids[name][split]]


# --------------------------------------------------------------------------
# data and source LMs


def synth_config(cfg: ExperimentConfig, seed: int) -> SynthConfig:
    d = cfg.data
    return SynthConfig(seed=seed, n_domains=d.n_domains, n_slots=d.n_slots, words_per_slot=d.words_per_slot,
                       overlap=d.overlap, ambiguity=d.ambiguity, noise=d.noise, min_len=d.min_len, n_train=d.n_train,
                       n_valid=d.n_valid, n_test=d.n_test)


def _load_file_domains(cfg: ExperimentConfig) -> dict[str, dict[str, ParallelCorpus]]:
    d = cfg.data
    raw = {}
    for dom in cfg.domains:
        raw[dom.name] = {}
        for split in SPLITS:
            corpus, report = load_parallel(getattr(dom, split), d.min_len_filter, d.max_len_filter, d.max_ratio, dom.name)
            log.info("%s.%s: %s", dom.name, split, report)
            if not len(corpus):
                raise ValueError(f"domain {dom.name} {split} split is empty after filtering")
            raw[dom.name][split] = corpus
    return raw


def _segment(raw, merges: int):
    """Learn one BPE model per language on all training data and apply it everywhere."""
    src_bpe = train_bpe([s for dom in raw.values() for s in dom["train"].sources], merges)
    tgt_bpe = train_bpe([t for dom in raw.values() for t in dom["train"].targets], merges)
    return {
        name: {split: ParallelCorpus(tuple((apply_bpe(src_bpe, s), apply_bpe(tgt_bpe, t)) for s, t in c.pairs), c.domain_tag)
               for split, c in dom.items()}
        for name, dom in raw.items()
    }


def build_world(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> World:
    if cfg.data.source == "synthetic":
        scfg = synth_config(cfg, seed)
        raw = generate(scfg)
        if out is not None:
            write_domains(raw, out / "data", scfg)
    else:
        raw = _load_file_domains(cfg)
        if cfg.data.bpe_merges > 0:
            raw = _segment(raw, cfg.data.bpe_merges)
        if out is not None:
            write_domains(raw, out / "data")
    names = list(raw)
    src_vocab = build_vocab([raw[n]["train"].sources for n in names], cfg.data.min_count)
    tgt_vocab = build_vocab([raw[n]["train"].targets for n in names], cfg.data.min_count)
    ids = {
        n: {split: [(src_vocab.encode(s.tokens), tgt_vocab.encode(t.tokens)) for s, t in c.pairs] for split, c in raw[n].items()}
        for n in names
    }
    lms = [train_ngram([x for x, _ in ids[n]["train"]], cfg.lm.order, len(src_vocab), cfg.lm.discount) for n in names]
    lam = estimate_lambda(lms, [[x for x, _ in ids[n]["valid"]] for n in names], cfg.lm.normalize_lambda, names)
    if out is not None:
        src_vocab.save(out / "vocab.src.txt")
        tgt_vocab.save(out / "vocab.tgt.txt")
        for n, lm in zip(names, lms):
            write_arpa(lm, out / f"lm.{n}.arpa", src_vocab)
        (out / "lambda.tsv").write_text(lam.to_tsv())
    return World(names, raw, src_vocab, tgt_vocab, ids, lms, lam)


def lm_posterior_summary(world: World) -> dict[str, float]:
    """Mean source-LM posterior mass on the true domain over each test set."""
    out = {}
    for t, n in enumerate(world.names):
        post = [source_task_posterior(world.lms, x)[t] for x in world.sources(n, "test")]
        out[n] = float(np.mean(post))
    return out


# --------------------------------------------------------------------------
# models


def train_base_model(cfg: ExperimentConfig, world: World, d: int, seed: int):
    m = cfg.model
    data = world.ids[world.names[d]]["train"]
    if m.kind == "table":
        return TableModel.train(data, len(world.tgt_vocab)), None
    init = ToyNeuralModel(len(world.src_vocab), len(world.tgt_vocab), m.src_dim, m.tgt_dim, m.hidden,
                          seed=substream(seed, "init", d), init_scale=m.init_scale)
    return train_epochs(init, data, m.epochs, batch_size=m.batch_size, learning_rate=m.learning_rate,
                        seed=substream(seed, "shuffle", d))


def _ppl(model, world: World, names, split: str) -> float:
    return float(np.mean([perplexity(model, world.ids[n][split]) for n in names]))


def _fmt_strength(s: float) -> str:
    return repr(float(s))


def adapt_stage(cfg: ExperimentConfig, world: World, start: dict[str, ToyNeuralModel], stage: int, seed: int,
                out: Path | None = None) -> tuple[dict, dict[str, ToyNeuralModel]]:
    """Fine-tune each regime's current model on domain ``stage``.

    ``start[regime]`` is the model that regime reached after the previous
    stage; it also serves as the regularization anchor, and the Fisher
    estimate is taken on the previous domain's training data. For each of
    L2 and EWC the strength is chosen from the grid as the one with the
    lowest old-domain validation perplexity among those whose new-domain
    validation perplexity is within ``match_tolerance`` (relative) of the
    unregularized run.
    """
    ft = cfg.finetune
    new = world.names[stage]
    old = world.names[:stage]
    data = world.ids[new]["train"]
    runs, models = [], {}

    def run(regime, strength, reg):
        model, trace = train_epochs(start[regime], data, ft.epochs, batch_size=ft.batch_size, cfg=reg,
                                    learning_rate=ft.learning_rate, seed=substream(seed, "shuffle", 100 + stage))
        row = {
            "regime": regime,
            "strength": float(strength),
            "old_valid": _ppl(model, world, old, "valid"),
            "new_valid": _ppl(model, world, [new], "valid"),
            "old_test": _ppl(model, world, old, "test"),
            "new_test": _ppl(model, world, [new], "test"),
            "final_loss": trace.loss[-1] if trace.loss else None,
        }
        if out is not None:
            trace.write_csv(out / f"trace.stage{stage}.{regime}.{_fmt_strength(strength)}.csv")
        runs.append(row)
        models[(regime, float(strength))] = model
        return row

    base_rows = {r: {"old_valid": _ppl(start[r], world, old, "valid"), "old_test": _ppl(start[r], world, old, "test"),
                     "new_valid": _ppl(start[r], world, [new], "valid"), "new_test": _ppl(start[r], world, [new], "test")}
                 for r in REGIMES}
    ref = run("none", 0.0, RegularizerConfig())
    prev_data = world.ids[world.names[stage - 1]]["train"]
    samples = ft.fisher_samples or None
    fishers = {}
    for regime in ("l2", "ewc"):
        anchor = start[regime].theta.copy()
        if regime == "ewc":
            fisher = estimate_fisher_diagonal(start[regime], prev_data, samples,
                                              np.random.default_rng(substream(seed, "fisher", stage)))
            fishers[regime] = fisher
        for s in ft.strengths:
            reg = RegularizerConfig(regime, s, anchor, fishers[regime].values if regime == "ewc" else None)
            run(regime, s, reg)

    selected = {"none": dict(ref)}
    limit = (1.0 + ft.match_tolerance) * ref["new_valid"]
    for regime in ("l2", "ewc"):
        rows = [r for r in runs if r["regime"] == regime]
        matched = [r for r in rows if r["new_valid"] <= limit]
        if matched:
            best = min(matched, key=lambda r: (r["old_valid"], r["strength"]))
        else:
            log.warning("stage %d %s: no strength matched the new-domain perplexity; using the closest", stage, regime)
            best = min(rows, key=lambda r: (r["new_valid"], r["strength"]))
        selected[regime] = dict(best, matched=bool(matched))
    for regime, row in selected.items():
        base = base_rows[regime]
        row["old_test_before"] = base["old_test"]
        row["degradation"] = row["old_test"] - base["old_test"]
        row["degradation_ratio"] = row["old_test"] / base["old_test"]
    chosen = {r: models[(r, float(selected[r]["strength"]))] for r in REGIMES}
    report = {"new_domain": new, "old_domains": old, "match_limit": limit, "runs": runs, "selected": selected,
              "fisher_samples": fishers["ewc"].samples}
    return report, chosen


# --------------------------------------------------------------------------
# decoding


def _max_len(cfg: ExperimentConfig, x) -> int:
    return cfg.decode.max_len_factor * len(x) + cfg.decode.max_len_extra


def _decode(cfg: ExperimentConfig, spec, sources):
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(sources):
        groups.setdefault(_max_len(cfg, x), []).append(i)
    results = [None] * len(sources)
    for ml, idx in sorted(groups.items()):
        outs = decode_corpus(spec, [sources[i] for i in idx], cfg.decode.beam_size, ml, cfg.experiment.workers,
                             cfg.decode.length_norm)
        for i, r in zip(idx, outs):
            results[i] = r
    return results


def _bleu_row(world: World, outputs: dict[str, list[tuple[int, ...]]], out: Path | None, tag: str) -> dict[str, float]:
    row = {}
    all_h, all_r = [], []
    for n in world.names:
        hyps = [world.tgt_vocab.decode(y) for y in outputs[n]]
        refs = [t.tokens for t in world.raw[n]["test"].targets]
        row[n] = corpus_bleu(hyps, refs).bleu
        all_h += hyps
        all_r += refs
        if out is not None:
            (out / f"{tag}.{n}.txt").write_text("".join(" ".join(h) + "\n" for h in hyps))
    row["concat"] = corpus_bleu(all_h, all_r).bleu
    return row


def bleu_table(cfg: ExperimentConfig, world: World, models, schemes, out: Path | None, family: str) -> dict:
    """BLEU per scheme and test domain, plus the per-domain oracle row.

    The oracle decodes each domain's test set with the family's model for
    that domain alone.
    """
    table = {}
    tests = {n: world.sources(n, "test") for n in world.names}
    for scheme in schemes:
        spec = make_spec(scheme, models, world.lms, world.lam)
        outputs = {n: [r.tokens for r in _decode(cfg, spec, tests[n])] for n in world.names}
        table[scheme] = _bleu_row(world, outputs, out, f"{family}.{scheme}")
    outputs = {n: [r.tokens for r in _decode(cfg, make_spec("uniform", [models[t]]), tests[n])]
               for t, n in enumerate(world.names)}
    table["oracle"] = _bleu_row(world, outputs, out, f"{family}.oracle")
    return table


def single_model_bleu(cfg: ExperimentConfig, world: World, models) -> list[list[float]]:
    """BLEU of model k alone on test domain t."""
    rows = []
    for m in models:
        spec = make_spec("uniform", [m])
        rows.append([corpus_bleu([world.tgt_vocab.decode(r.tokens) for r in _decode(cfg, spec, world.sources(n, "test"))],
                                 [t.tokens for t in world.raw[n]["test"].targets]).bleu for n in world.names])
    return rows


# --------------------------------------------------------------------------
# weight trajectories


def probe_trajectories(cfg: ExperimentConfig, world: World, models, seed: int, out: Path | None = None) -> list[dict]:
    """Decode neutral-then-exclusive probe sentences and check the weight trajectory.

    A probe passes when the in-domain weight stays within 0.1 of 1/K while
    the neutral prefix is translated and exceeds 0.9 within three steps of
    the first domain-exclusive token.
    """
    if cfg.data.source != "synthetic" or cfg.decode.probes < 1:
        return []
    scfg = synth_config(cfg, seed)
    K = len(models)
    per_domain = [cfg.decode.probes // K + (1 if d < cfg.decode.probes % K else 0) for d in range(K)]
    spec = make_spec(cfg.decode.probe_scheme, models, world.lms, world.lam)
    results = []
    for d, count in enumerate(per_domain):
        for j, ((src, ref), first) in enumerate(make_probes(scfg, d, count)):
            x = world.src_vocab.encode(src.tokens)
            res = beam_decode(spec, x, cfg.decode.beam_size, _max_len(cfg, x), cfg.decode.length_norm)
            w = np.array([st.weights[d] for st in res.trajectory])
            prefix = w[:first]
            window = w[first : first + 4]
            dev = float(np.max(np.abs(prefix - 1.0 / K))) if len(prefix) else 0.0
            peak = float(np.max(window)) if len(window) else 0.0
            name = f"probe.{domain_name(d)}.{j}"
            if out is not None:
                (out / f"{name}.tsv").write_text(trajectory_tsv(res, world.tgt_vocab.tokens))
            results.append({
                "name": name,
                "domain": world.names[d],
                "source": " ".join(src.tokens),
                "reference": " ".join(ref.tokens),
                "output": " ".join(world.tgt_vocab.decode(res.tokens)),
                "first_exclusive": first,
                "in_domain_weights": [float(v) for v in w],
                "neutral_max_deviation": dev,
                "peak_after_exclusive": peak,
                "passed": bool(dev <= 0.1 and peak > 0.9),
            })
    return results


# --------------------------------------------------------------------------
# driver


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> dict:
    if out is not None:
        for sub in ("", "models", "traces", "decode", "trajectories"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    world = build_world(cfg, seed, out)
    K = len(world.names)
    base = []
    for d in range(K):
        model, trace = train_base_model(cfg, world, d, seed)
        base.append(model)
        if out is not None:
            if isinstance(model, ToyNeuralModel):
                model.save(out / "models" / f"base.{world.names[d]}.ckpt", world.src_vocab.tokens, world.tgt_vocab.tokens)
                trace.write_csv(out / "traces" / f"base.{world.names[d]}.csv")
            else:
                model.save(out / "models" / f"base.{world.names[d]}.ckpt")
    result = {
        "domains": world.names,
        "lambda": world.lam.values.tolist(),
        "lm_posterior_true_domain": lm_posterior_summary(world),
        "base_perplexity": {world.names[d]: {n: perplexity(base[d], world.ids[n]["test"]) for n in world.names}
                            for d in range(K)},
    }
    families = {"unadapted": base}
    if cfg.model.kind == "neural" and K >= 2:
        stages = []
        chains = {r: [base[0]] for r in REGIMES}
        for stage in range(1, K):
            report, chosen = adapt_stage(cfg, world, {r: chains[r][-1] for r in REGIMES}, stage, seed,
                                         out / "traces" if out is not None else None)
            stages.append(report)
            for r in REGIMES:
                chains[r].append(chosen[r])
                if out is not None:
                    chosen[r].save(out / "models" / f"{r}.stage{stage}.ckpt", world.src_vocab.tokens, world.tgt_vocab.tokens)
        result["adaptation"] = stages
        families["ewc"] = chains["ewc"]
        families["noreg"] = chains["none"]
        families["l2"] = chains["l2"]
    dec_dir = out / "decode" if out is not None else None
    result["single_model_bleu"] = single_model_bleu(cfg, world, base)
    result["bleu"] = {"unadapted": bleu_table(cfg, world, base, SCHEMES, dec_dir, "unadapted")}
    if "ewc" in families:
        result["bleu"]["ewc"] = bleu_table(cfg, world, families["ewc"], SCHEMES, dec_dir, "ewc")
        result["bleu"]["noreg"] = bleu_table(cfg, world, families["noreg"], ("uniform",), dec_dir, "noreg")
    result["probes"] = probe_trajectories(cfg, world, base, seed, out / "trajectories" if out is not None else None)
    return result


def _mean_tables(per_seed: list[dict]) -> dict:
    out = {}
    for family in per_seed[0]["bleu"]:
        out[family] = {}
        for scheme, row in per_seed[0]["bleu"][family].items():
            out[family][scheme] = {k: float(np.mean([s["bleu"][family][scheme][k] for s in per_seed])) for k in row}
    return out


def file_manifest(out: Path) -> dict[str, str]:
    """sha256 of every output file except the timing record."""
    manifest = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in (TIMING_FILE, "manifest.json"):
            manifest[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return manifest


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run every seed, write ``summary.json`` and ``manifest.json``, return the summary."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    timing = {}
    seeds = {}
    t_all = time.perf_counter()
    for seed in cfg.experiment.seeds:
        t0 = time.perf_counter()
        seeds[str(seed)] = run_seed(cfg, seed, out / f"seed{seed}")
        timing[f"seed{seed}"] = time.perf_counter() - t0
        log.info("seed %d done in %.1fs", seed, timing[f"seed{seed}"])
    per_seed = list(seeds.values())
    summary = {"config": cfg.to_dict(), "seeds": seeds, "mean_bleu": _mean_tables(per_seed)}
    _check_finite(summary)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest = file_manifest(out)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timing["total"] = time.perf_counter() - t_all
    (out / TIMING_FILE).write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return summary


def _check_finite(obj, path="summary") -> None:
    from .training import NumericalError

    if isinstance(obj, float) and not np.isfinite(obj):
        raise NumericalError(f"non-finite metric at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")
