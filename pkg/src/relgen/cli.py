"""Command-line interface.

Every artifact-producing command resolves its full configuration
(defaults included), writes it as config.json next to its outputs, and is
deterministic: rerunning with the same config and seeds reproduces the
same bytes. Wall-clock timings go to the console only, never into
artifacts.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, decoding, verify
from .codec import (
    OrderKind,
    SymbolVocab,
    decode_symbolic,
    encode_lexical,
    encode_symbolic,
    parse_lexical,
    parse_symbol_text,
)
from .corpus import (
    REFERENCE_SPLIT_SIZES,
    CorpusSplit,
    SynthConfig,
    corpus_stats,
    gen_synthetic,
    import_docred,
    read_corpus,
    split_fact_keyer,
    training_fact_set,
    write_corpus,
)
from .metrics import evaluate, nary_f1
from .negsample import make_plan
from .schema import RelationInstance, RelationMatrix, nonzero_cells


def _out_dir(raw: str) -> Path:
    """Relative output paths resolve under $RELGEN_OUT (default: cwd)."""
    path = Path(raw)
    if not path.is_absolute():
        path = Path(os.environ.get("RELGEN_OUT", ".")) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _freeze_config(outdir: Path, command: str, args: argparse.Namespace) -> None:
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func",)
    }
    _write_json(
        outdir / "config.json",
        {"command": command, "version": __version__, "resolved": resolved},
    )


def _order_from_args(args) -> OrderKind:
    if args.order == "random":
        return OrderKind.random(args.order_seed)
    return OrderKind(args.order)


def _neg_from_args(args) -> str:
    # "asymmetric" + --neg-side folds into the sided strategy name.
    if args.neg == "asymmetric":
        return "asym_left" if args.neg_side == "left_heavy" else "asym_right"
    return args.neg


def _load_split(corpus_dir: str, name: str) -> CorpusSplit:
    splits = read_corpus(corpus_dir, [name])
    return splits[name]


def _facts_to_json(insts, relations) -> list[dict]:
    out = []
    for inst in sorted(insts):
        rec = {"r": relations.name(inst.relation)}
        if inst.arity == 2:
            rec["h"], rec["t"] = inst.entities
        else:
            rec["slots"] = list(inst.entities)
        out.append(rec)
    return out


def _facts_from_json(records, relations) -> set[RelationInstance]:
    out = set()
    for rec in records:
        cell = tuple(rec["slots"]) if "slots" in rec else (rec["h"], rec["t"])
        out.add(RelationInstance(entities=cell, relation=relations.index(rec["r"])))
    return out


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_synth(args) -> int:
    outdir = _out_dir(args.out)
    _freeze_config(outdir, "synth", args)
    splits = []
    plan = [("train", args.train_docs, 0), ("dev", args.dev_docs, 1), ("test", args.test_docs, 2)]
    for name, count, offset in plan:
        if count <= 0:
            continue
        cfg = SynthConfig(
            document_count=count,
            max_entities=args.max_entities,
            min_entities=args.min_entities,
            relation_type_count=args.relation_types,
            density=args.density,
            token_vocab_size=args.token_vocab,
            sentence_len_bounds=(args.sent_len_min, args.sent_len_max),
            two_word_name_prob=args.two_word_name_prob,
            diagonal_fact_odds=args.diagonal_fact_odds,
            intro_sentences=not args.no_intros,
            pair_sentence_window=args.pair_window,
            seed=args.seed + offset,
            name=name,
        )
        splits.append(gen_synthetic(cfg))
    if not splits:
        print("nothing to generate: all split sizes are zero", file=sys.stderr)
        return 2
    write_corpus(outdir, splits)
    for split in splits:
        print(f"{split.name}: {json.dumps(corpus_stats(split), sort_keys=True)}")
    return 0


def cmd_ingest(args) -> int:
    outdir = _out_dir(args.out)
    _freeze_config(outdir, "ingest", args)
    with open(args.input) as fh:
        records = json.load(fh)
    relations = None
    if args.relations:
        payload = json.loads(Path(args.relations).read_text())
        names = payload["names"] if isinstance(payload, dict) else payload
        from .schema import RelationTypeSet

        relations = RelationTypeSet(tuple(names))
    split = import_docred(records, relations, name=args.split_name)
    ref = REFERENCE_SPLIT_SIZES.get(args.reference or "", None)
    if ref is not None:
        expected = dict(zip(("train", "dev", "test"), ref)).get(args.split_name)
        if expected is not None and expected != len(split):
            print(
                f"note: {args.reference}/{args.split_name} usually has "
                f"{expected} documents, got {len(split)}",
                file=sys.stderr,
            )
    write_corpus(outdir, [split])
    print(f"{split.name}: {json.dumps(corpus_stats(split), sort_keys=True)}")
    return 0


def cmd_encode(args) -> int:
    outdir = _out_dir(args.out)
    _freeze_config(outdir, "encode", args)
    split = _load_split(args.corpus, args.split)
    order = _order_from_args(args)
    vocab = SymbolVocab.default(split.relations.count, arity=args.arity)
    lines = []
    for doc in split.documents:
        matrix = split.gold[doc.doc_id]
        if args.format == "symbolic":
            plan = None
            if args.neg != "none":
                plan = make_plan(
                    matrix, _neg_from_args(args), fraction=args.neg_fraction,
                    window=args.neg_window, seed=args.neg_seed,
                    epoch=args.neg_epoch, doc_id=doc.doc_id,
                )
            seq = encode_symbolic(matrix, vocab, order, plan, doc.doc_id)
            lines.append(f"{doc.doc_id}\t{seq.render()}")
        else:
            text = encode_lexical(doc, matrix, split.relations, order)
            lines.append(f"{doc.doc_id}\t{text}")
    (outdir / "sequences.tsv").write_text("\n".join(lines) + "\n")
    print(f"encoded {len(lines)} documents -> {outdir / 'sequences.tsv'}")
    return 0


def cmd_decode(args) -> int:
    outdir = _out_dir(args.out)
    _freeze_config(outdir, "decode", args)
    split = _load_split(args.corpus, args.split)
    docs = {d.doc_id: d for d in split.documents}
    vocab = SymbolVocab.default(split.relations.count, arity=args.arity)
    rows = []
    report = {"documents": 0, "malformed_groups": 0, "dropped_unknown_mention": 0,
              "dropped_unknown_relation": 0, "dropped_malformed": 0}
    with open(args.sequences) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, payload = line.partition("\t")
            if doc_id not in docs:
                raise SystemExit(f"decode: unknown document {doc_id!r}")
            doc = docs[doc_id]
            n = doc.entity_count
            if args.format == "symbolic":
                ids = parse_symbol_text(payload)
                parse = decode_symbolic(ids, vocab, slot_sizes=(n,) * args.arity)
                matrix = parse.matrix
                report["malformed_groups"] += parse.malformed_groups
            else:
                lex = parse_lexical(payload, doc, split.relations, arity=args.arity)
                matrix = lex.matrix
                report["dropped_unknown_mention"] += lex.dropped_unknown_mention
                report["dropped_unknown_relation"] += lex.dropped_unknown_relation
                report["dropped_malformed"] += lex.dropped_malformed
            report["documents"] += 1
            rows.append(
                {
                    "doc_id": doc_id,
                    "facts": _facts_to_json(nonzero_cells(matrix), split.relations),
                }
            )
    with open(outdir / "predictions.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    _write_json(outdir / "decode_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import (
        ModelConfig,
        ModelScoreOracle,
        RunSpec,
        TrainConfig,
        doc_source_ids,
        predict_split,
        save_checkpoint,
        train,
    )

    if args.format == "lexical" and args.parallel_rows:
        raise SystemExit("--parallel-rows requires --format symbolic")
    if args.format == "lexical" and args.row_targets:
        raise SystemExit("--row-targets requires --format symbolic")
    if args.format == "lexical" and args.neg != "none":
        raise SystemExit("--neg applies to --format symbolic only")

    outdir = _out_dir(args.out)
    _freeze_config(outdir, "train", args)
    train_split = _load_split(args.corpus, args.train_split)
    dev_split = _load_split(args.corpus, args.dev_split)

    model_cfg = ModelConfig(
        width=args.width, heads=args.heads,
        encoder_layers=args.encoder_layers, decoder_layers=args.decoder_layers,
        ffn_width=args.ffn_width, max_src_len=args.max_src_len,
        max_tgt_len=args.max_tgt_len, dropout=args.dropout,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        warmup_frac=args.warmup_frac, weight_decay=args.weight_decay,
        clip_norm=args.clip_norm, seed=args.seed,
        stop_at_dev_f1=args.stop_at_dev_f1, no_rel_weight=args.no_rel_weight,
    )
    run = RunSpec(
        target_format=args.format, order_kind=args.order,
        order_seed=args.order_seed, neg_strategy=_neg_from_args(args),
        neg_fraction=args.neg_fraction, neg_window=args.neg_window,
        warm_start=args.warm_start, row_targets=args.row_targets,
        max_groups=args.max_groups,
    )
    result = train(train_split, dev_split, model_cfg, train_cfg, run)

    with open(outdir / "metrics.jsonl", "w") as fh:
        for h in result.history:
            row = {
                "epoch": h.epoch, "train_loss": h.train_loss,
                "dev_precision": h.dev_precision, "dev_recall": h.dev_recall,
                "dev_f1": h.dev_f1, "positive_terms": h.positive_terms,
                "negative_terms": h.negative_terms,
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
            print(
                f"epoch {h.epoch}: loss={h.train_loss:.4f} dev_f1={h.dev_f1:.4f} "
                f"({h.seconds:.1f}s)"
            )
    save_checkpoint(
        outdir / "checkpoint.bin", result.model, result.tokenizer,
        result.vocab, train_split.relations,
    )

    if args.parallel_rows:
        preds = {}
        budget = decoding.BeamConfig(max_len=model_cfg.max_tgt_len - 1)
        for doc in dev_split.documents:
            src = doc_source_ids(doc, result.tokenizer, model_cfg.max_src_len)
            oracle = ModelScoreOracle(result.model, result.tokenizer, src, row_mode=True)
            outcome = decoding.decode_rows_parallel(
                oracle, result.vocab, (doc.entity_count,) * result.vocab.arity,
                config=budget,
            )
            preds[doc.doc_id] = {
                RelationInstance(entities=c, relation=r)
                for c, rels in outcome.matrix.cells.items()
                for r in rels
            }
    else:
        preds = predict_split(
            result.model, result.tokenizer, result.vocab, dev_split, run
        )
    with open(outdir / "predictions.jsonl", "w") as fh:
        for doc in dev_split.documents:
            row = {
                "doc_id": doc.doc_id,
                "facts": _facts_to_json(preds[doc.doc_id], dev_split.relations),
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    gold = {
        doc.doc_id: set(nonzero_cells(dev_split.gold[doc.doc_id]))
        for doc in dev_split.documents
    }
    report = evaluate(
        preds, gold,
        train_keys=training_fact_set(train_split),
        fact_key=split_fact_keyer(dev_split),
    )
    final = {
        "final_dev_f1": result.final_dev_f1,
        "best_dev_f1": result.best_dev_f1(),
        "final_eval": {
            "precision": report.precision, "recall": report.recall,
            "f1": report.f1, "ign_f1": report.ign_f1,
            "ign_degenerate": report.ign_degenerate,
        },
        "epochs_run": len(result.history),
        "warm_start_missing": result.warm_start_missing,
        "torch_threads": torch.get_num_threads(),
    }
    _write_json(outdir / "final_report.json", final)
    print(json.dumps(final["final_eval"], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    outdir = _out_dir(args.out)
    _freeze_config(outdir, "eval", args)
    split = _load_split(args.corpus, args.split)
    gold = {
        doc.doc_id: set(nonzero_cells(split.gold[doc.doc_id]))
        for doc in split.documents
    }
    preds: dict[str, set[RelationInstance]] = {d: set() for d in gold}
    with open(args.predictions) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["doc_id"] not in preds:
                raise SystemExit(f"eval: unknown document {rec['doc_id']!r}")
            preds[rec["doc_id"]] = _facts_from_json(rec["facts"], split.relations)
    if args.arity:
        report = nary_f1(preds, gold, arity=args.arity)
    else:
        train_keys = None
        keyer = None
        if args.ign_train_split:
            train_keys = training_fact_set(_load_split(args.corpus, args.ign_train_split))
            keyer = split_fact_keyer(split)
        report = evaluate(
            preds, gold, train_keys=train_keys,
            fact_key=keyer if keyer else (lambda d, i: i),
            per_relation=args.per_relation,
        )
    payload = {
        "precision": report.precision, "recall": report.recall, "f1": report.f1,
        "tp": report.tp, "fp": report.fp, "fn": report.fn,
        "ign_f1": report.ign_f1, "ign_degenerate": report.ign_degenerate,
        "per_relation": {
            split.relations.name(r): asdict(s) for r, s in report.per_relation.items()
        },
    }
    _write_json(outdir / "report.json", payload)
    print(report.summary(split.relations))
    return 0


def cmd_probe_attention(args) -> int:
    from .model import (
        attention_pointers,
        batched_symbolic_greedy,
        doc_source_ids,
        load_checkpoint,
    )

    outdir = _out_dir(args.out)
    _freeze_config(outdir, "probe-attention", args)
    model, tokenizer, vocab, relations = load_checkpoint(
        Path(args.run) / "checkpoint.bin"
    )
    split = _load_split(args.corpus, args.split)
    if split.relations != relations:
        raise SystemExit("probe-attention: corpus relations differ from checkpoint")
    docs = split.documents[: args.limit] if args.limit else split.documents
    srcs = [doc_source_ids(d, tokenizer, model.config.max_src_len) for d in docs]
    sizes = [(d.entity_count,) * vocab.arity for d in docs]
    seqs = batched_symbolic_greedy(model, tokenizer, vocab, srcs, sizes)
    rows = []
    for doc, src, seq in zip(docs, srcs, seqs):
        pointers = attention_pointers(model, src, tokenizer, seq)
        rows.append(
            {
                "doc_id": doc.doc_id,
                "groups": len(seq.ids) // (vocab.arity + 1),
                "pointers": [list(p) for p in pointers],
            }
        )
    with open(outdir / "pointers.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    with_pointers = sum(1 for r in rows if r["pointers"])
    print(f"probed {len(rows)} documents, {with_pointers} with >=2 groups")
    return 0


def cmd_verify(args) -> int:
    outcomes = verify.run_all(fast=args.fast)
    failed = 0
    for o in outcomes:
        mark = "PASS" if o.ok else "FAIL"
        print(f"[{mark}] {o.name}: {o.detail} ({o.seconds:.1f}s)")
        if not o.ok:
            failed += 1
    if args.out:
        outdir = _out_dir(args.out)
        _freeze_config(outdir, "verify", args)
        _write_json(
            outdir / "verify_report.json",
            [{"name": o.name, "ok": o.ok, "detail": o.detail} for o in outcomes],
        )
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relgen",
        description=(
            "Document-level relation extraction as constrained generation of "
            "symbolic relation-matrix sequences."
        ),
        epilog=(
            "Seed layering: corpus generation uses `synth --seed` (dev/test "
            "offset by +1/+2); training uses `train --seed` for model init, "
            "batch order and dynamic sampling; encode-time sampling uses "
            "`encode --neg-seed`. Relative --out paths resolve under "
            "$RELGEN_OUT when set."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--train-docs", type=int, default=500)
    p.add_argument("--dev-docs", type=int, default=100)
    p.add_argument("--test-docs", type=int, default=0)
    p.add_argument("--min-entities", type=int, default=4)
    p.add_argument("--max-entities", type=int, default=8)
    p.add_argument("--relation-types", type=int, default=4)
    p.add_argument("--density", type=float, default=0.03)
    p.add_argument("--token-vocab", type=int, default=50)
    p.add_argument("--sent-len-min", type=int, default=4)
    p.add_argument("--sent-len-max", type=int, default=7)
    p.add_argument("--two-word-name-prob", type=float, default=0.35)
    p.add_argument("--no-intros", action="store_true",
                   help="drop intro/name/noise sentences; pair sentences only")
    p.add_argument("--pair-window", type=int, default=1,
                   help="band distance that always gets a pair sentence")
    p.add_argument("--diagonal-fact-odds", type=float, default=1.0,
                   help="odds ratio concentrating facts on adjacent pairs")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="import an exported benchmark JSON file")
    p.add_argument("--input", required=True, help="JSON array of records")
    p.add_argument("--out", required=True)
    p.add_argument("--split-name", default="train")
    p.add_argument("--relations", help="JSON file fixing the relation inventory")
    p.add_argument(
        "--reference", choices=sorted(REFERENCE_SPLIT_SIZES),
        help="check document counts against a known benchmark",
    )
    p.set_defaults(func=cmd_ingest)

    def add_codec_args(p, with_neg: bool) -> None:
        p.add_argument("--format", choices=("symbolic", "lexical"), default="symbolic")
        p.add_argument(
            "--order", choices=("row_column", "annotation", "random"),
            default="row_column",
        )
        p.add_argument("--order-seed", type=int, default=0)
        p.add_argument("--arity", type=int, choices=(2, 4), default=2)
        if with_neg:
            p.add_argument(
                "--neg",
                choices=("none", "random", "diagonal", "asymmetric",
                         "asym_left", "asym_right", "dynamic", "all"),
                default="none",
            )
            p.add_argument(
                "--neg-side", choices=("left_heavy", "right_heavy"),
                default="right_heavy",
                help="heavy side for --neg asymmetric",
            )
            p.add_argument("--neg-fraction", type=float, default=0.10)
            p.add_argument("--neg-window", type=int, default=1)

    p = sub.add_parser("encode", help="serialize gold matrices to sequences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    add_codec_args(p, with_neg=True)
    p.add_argument("--neg-seed", type=int, default=0, help="sampling seed")
    p.add_argument("--neg-epoch", type=int, default=0, help="epoch for dynamic plans")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="parse sequences back into fact predictions")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--sequences", required=True, help="TSV from encode (or a model)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("symbolic", "lexical"), default="symbolic")
    p.add_argument("--arity", type=int, choices=(2, 4), default=2)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train the small encoder-decoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--dev-split", default="dev")
    p.add_argument("--out", required=True, help="run directory")
    add_codec_args(p, with_neg=True)
    p.add_argument("--warm-start", action="store_true",
                   help="initialize symbol embeddings from base token embeddings")
    p.add_argument("--row-targets", action="store_true",
                   help="train on per-row targets (symbolic only)")
    p.add_argument("--parallel-rows", action="store_true",
                   help="decode dev predictions row-by-row (symbolic only)")
    p.add_argument("--max-groups", type=int, default=40)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup-frac", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0, help="model/train/sampling seed")
    p.add_argument("--stop-at-dev-f1", type=float, default=None)
    p.add_argument("--no-rel-weight", type=float, default=1.0,
                   help="loss weight on empty-cell target tokens")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--encoder-layers", type=int, default=2)
    p.add_argument("--decoder-layers", type=int, default=2)
    p.add_argument("--ffn-width", type=int, default=256)
    p.add_argument("--max-src-len", type=int, default=512)
    p.add_argument("--max-tgt-len", type=int, default=256)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a predictions file against gold")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--predictions", required=True, help="predictions.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--ign-train-split",
                   help="also report F1 ignoring facts seen in this split")
    p.add_argument("--per-relation", action="store_true")
    p.add_argument("--arity", type=int, default=0,
                   help="score fixed-arity tuples instead of the default")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-attention", help="group-level attention pointers")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0, help="probe only the first N docs")
    p.set_defaults(func=cmd_probe_attention)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--fast", action="store_true", help="smaller randomized budgets")
    p.add_argument("--out", help="also write verify_report.json here")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
