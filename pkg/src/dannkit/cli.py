"""Command line interface.

Subcommands: ``prepare`` (split data and write the manifest), ``train``
(one run with artifacts), ``sweep`` (train across several lambda values),
``diagnose`` (feature report from a checkpoint), ``eval`` (accuracy of a
checkpoint on a dataset).

Configuration is a flat JSON object; command line flags override file
values, which override built-in defaults.  When lambda is set nowhere it
defaults to 0.1, or 0.5 in cross-lingual mode.  Exit codes: 0 success,
2 configuration problem, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .data import (FieldMap, SamplingPlan, SynthSpec, load_jsonl, make_splits,
                   synth_generate)
from .diagnostics import feature_report, normalized_attention
from .embeddings import EmbeddingTable, load_embeddings
from .trainer import (ConfigError, DannConfig, evaluate, load_checkpoint,
                      train)

_CFG_KEYS = {f.name for f in fields(DannConfig)}
_DATA_KEYS = {"source_path", "target_path", "embeddings_path", "embeddings",
              "text_field", "rating_field", "rating_scheme", "label_field",
              "label_values", "domain_field", "domain_names", "default_domain",
              "synth", "n_target_labeled", "train_fraction", "zero_shot", "out"}
_SWEEP_DEFAULT = (0.01, 0.1, 0.5, 1.0)


def _read_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - _CFG_KEYS - _DATA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _resolve(args):
    """Merge defaults < config file < flags into (DannConfig, extras)."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(_read_config_file(args.config))
    for flag, key in (("seed", "seed"), ("extractor", "extractor"),
                      ("lam", "lam"), ("critic_loss", "critic_loss"),
                      ("domains", "n_domains"), ("epochs", "epochs"),
                      ("out", "out")):
        v = getattr(args, flag, None)
        if v is not None:
            merged[key] = v
    if getattr(args, "adversarial", None) is not None:
        merged["adversarial"] = args.adversarial == "on"
    if getattr(args, "zero_shot", False):
        merged["zero_shot"] = True

    extras = {k: merged.pop(k) for k in list(merged) if k in _DATA_KEYS}
    if "lam" not in merged:
        merged["lam"] = 0.5 if merged.get("cross_lingual") else 0.1
    cfg = DannConfig.from_dict(merged)
    cfg.validate()
    return cfg, extras


def _field_map(extras):
    return FieldMap(text_field=extras.get("text_field", "text"),
                    rating_field=extras.get("rating_field"),
                    rating_scheme=extras.get("rating_scheme", "amazon-binary"),
                    label_field=extras.get("label_field"),
                    label_values=extras.get("label_values", []),
                    domain_field=extras.get("domain_field"),
                    domain_names=extras.get("domain_names", []),
                    default_domain=extras.get("default_domain", "all"))


def _load_data(cfg, extras):
    """Turn the data portion of the config into (PreparedData, tables)."""
    plan = SamplingPlan(n_target_labeled=int(extras.get("n_target_labeled", 500)),
                        train_fraction=float(extras.get("train_fraction", 0.8)),
                        seed=cfg.seed)
    zero_shot = bool(extras.get("zero_shot", False))

    if "synth" in extras:
        spec_dict = dict(extras["synth"])
        known = {f.name for f in fields(SynthSpec)}
        unknown = set(spec_dict) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        for tup in ("doc_len", "sent_len"):
            if tup in spec_dict:
                spec_dict[tup] = tuple(spec_dict[tup])
        synth = synth_generate(SynthSpec(**spec_dict), cfg.seed)
        prepared = make_splits(synth.source, synth.target, plan, zero_shot=zero_shot)
        return prepared, {d: synth.table for d in range(len(prepared.domain_names))}

    for need in ("source_path", "target_path"):
        if need not in extras:
            raise ConfigError(f"config needs either 'synth' or '{need}'")
    fmap = _field_map(extras)
    source = load_jsonl(extras["source_path"], fmap)
    target = load_jsonl(extras["target_path"], fmap)
    prepared = make_splits(source, target, plan, zero_shot=zero_shot)

    vocab = set()
    for doc in (prepared.source_train + prepared.source_test + prepared.target_train
                + prepared.target_test + prepared.target_unlabeled):
        vocab.update(doc.tokens)
    if "embeddings" in extras:
        by_name = extras["embeddings"]
        tables = {}
        for idx, name in enumerate(prepared.domain_names):
            if name not in by_name:
                raise ConfigError(f"'embeddings' lacks a path for domain {name!r}")
            tables[idx] = load_embeddings(by_name[name], restrict_to=vocab,
                                          trainable=cfg.train_embeddings)
    elif "embeddings_path" in extras:
        table = load_embeddings(extras["embeddings_path"], restrict_to=vocab,
                                trainable=cfg.train_embeddings)
        tables = {d: table for d in range(len(prepared.domain_names))}
    else:
        raise ConfigError("config needs 'embeddings_path' (or per-domain 'embeddings')")
    return prepared, tables


def _out_dir(extras, args):
    out = getattr(args, "out", None) or extras.get("out") or "runs/run"
    os.makedirs(out, exist_ok=True)
    return out


def _write_run(out, cfg, model, history):
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    from .trainer import save_checkpoint
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    history.to_csv(os.path.join(out, "history.csv"), include_seconds=False)
    with open(os.path.join(out, "timing.csv"), "w", encoding="utf-8") as f:
        f.write("epoch,seconds\n")
        for r in history.records:
            f.write(f"{r.epoch},{r.seconds:.3f}\n")


def _doc_json(doc, prepared):
    return {"uid": doc.uid, "tokens": doc.tokens, "sentences": [list(s) for s in doc.sentences],
            "label": None if doc.label is None else prepared.class_names[doc.label],
            "domain": prepared.domain_names[doc.domain]}


def cmd_prepare(args):
    cfg, extras = _resolve(args)
    prepared, _tables = _load_data(cfg, extras)
    out = _out_dir(extras, args)
    for split in ("source_train", "source_test", "target_train", "target_test",
                  "target_unlabeled"):
        with open(os.path.join(out, f"{split}.jsonl"), "w", encoding="utf-8") as f:
            for doc in getattr(prepared, split):
                f.write(json.dumps(_doc_json(doc, prepared), sort_keys=True) + "\n")
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(prepared.manifest(), f, sort_keys=True, indent=2)
        f.write("\n")
    sizes = {s: len(getattr(prepared, s)) for s in
             ("source_train", "source_test", "target_train", "target_test", "target_unlabeled")}
    print(f"prepared {out}: " + " ".join(f"{k}={v}" for k, v in sorted(sizes.items())))
    return 0


def cmd_train(args):
    cfg, extras = _resolve(args)
    prepared, tables = _load_data(cfg, extras)
    out = _out_dir(extras, args)

    def report(rec):
        print(f"epoch {rec.epoch}: p_loss={rec.p_loss:.4f} q_loss={rec.q_loss:.4f} "
              f"src_acc={rec.src_acc:.4f} tgt_acc={rec.tgt_acc:.4f}", flush=True)

    model, history = train(cfg, prepared, tables, on_epoch=report)
    _write_run(out, cfg, model, history)
    last = history.records[-1]
    print(f"done: src_acc={last.src_acc:.4f} tgt_acc={last.tgt_acc:.4f} -> {out}")
    return 0


def cmd_sweep(args):
    cfg, extras = _resolve(args)
    lams = [float(x) for x in args.lambdas.split(",")] if args.lambdas else list(_SWEEP_DEFAULT)
    if any(l < 0 for l in lams):
        raise ConfigError("sweep lambdas must be >= 0")
    prepared, tables = _load_data(cfg, extras)
    out = _out_dir(extras, args)
    rows = []
    for lam in lams:
        run_cfg = DannConfig.from_dict({**cfg.to_dict(), "lam": lam})
        run_out = os.path.join(out, f"lam{lam:g}")
        os.makedirs(run_out, exist_ok=True)
        model, history = train(run_cfg, prepared, tables)
        _write_run(run_out, run_cfg, model, history)
        rep = feature_report(model, prepared, sample_cap=500, pca_points=0)
        last = history.records[-1]
        rows.append((lam, last.src_acc, last.tgt_acc, rep.sep_features))
        print(f"lambda={lam:g}: src_acc={last.src_acc:.4f} tgt_acc={last.tgt_acc:.4f} "
              f"sep={rep.sep_features:.6f}", flush=True)
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as f:
        f.write("lambda,src_acc,tgt_acc,sep_features\n")
        for lam, sa, ta, sep in rows:
            f.write(f"{lam:g},{sa!r},{ta!r},{sep!r}\n")
    print(f"sweep results -> {os.path.join(out, 'sweep.csv')}")
    return 0


def cmd_diagnose(args):
    cfg, extras = _resolve(args)
    prepared, tables = _load_data(cfg, extras)
    model = load_checkpoint(args.checkpoint, tables)
    out = _out_dir(extras, args)
    report = feature_report(model, prepared)
    report.to_json(os.path.join(out, "report.json"))
    print(f"sep_features={report.sep_features:.6f}"
          + (f" hausdorff {report.hausdorff_before:.4f} -> {report.hausdorff_after:.4f}"
             if report.hausdorff_before is not None else ""))
    if args.attention is not None:
        pool = prepared.target_test or prepared.target_unlabeled
        if not (0 <= args.attention < len(pool)):
            raise ConfigError(f"--attention index out of range (0..{len(pool) - 1})")
        sents, weights = normalized_attention(model, pool[args.attention])
        for toks, w in zip(sents, weights):
            print("  " + " ".join(f"{t}({x:.2f})" for t, x in zip(toks, w)))
    print(f"report -> {os.path.join(out, 'report.json')}")
    return 0


def cmd_eval(args):
    cfg, extras = _resolve(args)
    prepared, tables = _load_data(cfg, extras)
    model = load_checkpoint(args.checkpoint, tables)
    which = {"source-test": prepared.source_test, "target-test": prepared.target_test}
    docs = which[args.split]
    acc = evaluate(model, docs)
    print(f"{args.split} accuracy: {acc:.4f} over {len(docs)} documents")
    return 0


def _add_common(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--extractor", choices=("avg", "tfidf", "cnn", "han"))
    p.add_argument("--lambda", dest="lam", type=float,
                   help="reversal strength (default 0.1; 0.5 cross-lingual)")
    p.add_argument("--critic-loss", dest="critic_loss", choices=("wasserstein", "ce"))
    p.add_argument("--adversarial", choices=("on", "off"))
    p.add_argument("--zero-shot", dest="zero_shot", action="store_true",
                   help="use no labeled target documents")
    p.add_argument("--domains", type=int, help="critic arity (2 = pooled source vs target)")
    p.add_argument("--epochs", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="dannkit",
                                     description="domain-adversarial text classification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, extra in (
            ("prepare", cmd_prepare, ()),
            ("train", cmd_train, ()),
            ("sweep", cmd_sweep, ("lambdas", "jobs")),
            ("diagnose", cmd_diagnose, ("checkpoint", "attention")),
            ("eval", cmd_eval, ("checkpoint", "split"))):
        p = sub.add_parser(name)
        _add_common(p)
        if "lambdas" in extra:
            p.add_argument("--lambdas", help="comma list (default 0.01,0.1,0.5,1)")
        if "jobs" in extra:
            p.add_argument("--jobs", type=int, default=1,
                           help="accepted for compatibility; runs stay sequential")
        if "checkpoint" in extra:
            p.add_argument("--checkpoint", required=True)
        if "attention" in extra:
            p.add_argument("--attention", type=int,
                           help="print attention weights for this target document")
        if "split" in extra:
            p.add_argument("--split", choices=("source-test", "target-test"),
                           default="target-test")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
