"""Command-line surface: corpus generation, training, synthesis, evaluation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Final artifacts are written via a temp file plus rename, so interrupted
runs never leave partial files at the destination paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import DataError, NumericalError, __version__
from .config import TrainConfig, dump_config, load_train_config
from .corpus import DEFAULT_SPLIT, SPLIT_SEED, CorpusData, load_manifest, split_manifest
from .dsp import DspConfig, write_wav
from .evaluate import (EvalClassifierConfig, export_embeddings, load_eval_classifier,
                       plot_embeddings, save_eval_classifier, train_eval_classifier,
                       transfer_accuracy, write_embeddings_tsv)
from .inference import synthesize
from .model import load_model_checkpoint
from .synthgen import generate_synthetic_corpus, load_corpus_spec
from .training import train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cycletts",
                description="Multi-reference TTS stylization with adversarial "
                            "cycle-consistency training.")
    p.add_argument("--version", action="version", version=f"cycletts {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic style-labeled corpus")
    g.add_argument("--spec", required=True, help="corpus spec YAML")
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--seed", type=int, required=True)

    t = sub.add_parser("train", help="train the synthesizer on a corpus")
    t.add_argument("--config", required=True, help="training config YAML")
    t.add_argument("--corpus", required=True, help="corpus directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints/metrics")
    t.add_argument("--ablate-intercross", action="store_true",
                   help="disable unpaired triplets, re-encoding, and "
                        "cross-dimension classifiers")
    t.add_argument("--no-resume", action="store_true",
                   help="start fresh even if a checkpoint exists in --out")

    s = sub.add_parser("synth", help="synthesize a waveform from text and two references")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True, help="space-separated token symbols")
    s.add_argument("--ref1", required=True, help="dimension-1 reference wave file")
    s.add_argument("--ref2", required=True, help="dimension-2 reference wave file")
    s.add_argument("--out", required=True, help="output wave file")
    s.add_argument("--dump-attention", help="write the attention matrix (.npy)")
    s.add_argument("--window", type=int, default=7,
                   help="attention window half-width (default 7)")

    c = sub.add_parser("eval-classifier", help="train an independent style classifier")
    c.add_argument("--corpus", required=True)
    c.add_argument("--dim", type=int, required=True, help="style dimension index (0-based)")
    c.add_argument("--out", required=True, help="classifier checkpoint path")
    c.add_argument("--steps", type=int, default=EvalClassifierConfig.steps)
    c.add_argument("--seed", type=int, default=EvalClassifierConfig.seed)
    c.add_argument("--mel-bins", type=int, default=EvalClassifierConfig.n_mel)

    e = sub.add_parser("eval-transfer", help="style-transfer accuracy on the test split")
    e.add_argument("--ckpt", required=True, help="trained model checkpoint")
    e.add_argument("--cls1", required=True, help="dimension-1 classifier checkpoint")
    e.add_argument("--cls2", required=True, help="dimension-2 classifier checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--seed", type=int, required=True, help="reference-selection seed")
    e.add_argument("--report", required=True, help="output report JSON")
    e.add_argument("--confusion-png", help="render the dimension-2 confusion matrix")
    e.add_argument("--embeddings-out", help="TSV of classifier embeddings of the outputs")
    e.add_argument("--n-texts", type=int, default=25)

    x = sub.add_parser("export-embeddings", help="export classifier embeddings of corpus audio")
    x.add_argument("--cls", required=True, help="classifier checkpoint")
    x.add_argument("--corpus", required=True)
    x.add_argument("--n", type=int, default=25, help="samples per class")
    x.add_argument("--out", required=True, help="output TSV")
    x.add_argument("--plot", help="render a 2-D projection PNG")
    x.add_argument("--seed", type=int, default=0)
    return p


def _cmd_gen_corpus(args) -> int:
    spec = load_corpus_spec(args.spec)
    manifest = generate_synthetic_corpus(spec, args.out, args.seed)
    print(f"wrote {len(manifest.records)} utterances to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_train_config(args.config)
    if args.ablate_intercross:
        config = dataclasses.replace(config, ablate_intercross=True)
    print("effective config:")
    print(dump_config(config))
    manifest = load_manifest(args.corpus)
    train_split, _, _ = split_manifest(manifest, DEFAULT_SPLIT, SPLIT_SEED)
    data = CorpusData(train_split, config.dsp)
    final = train(config, data, args.out, resume=not args.no_resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    result = synthesize(args.text, args.ref1, args.ref2, args.ckpt,
                        window=args.window)
    out = Path(args.out)
    tmp = out.with_suffix(out.suffix + ".tmp")
    write_wav(tmp, result.waveform, result.sample_rate)
    tmp.replace(out)
    if args.dump_attention:
        att_path = Path(args.dump_attention)
        att_tmp = att_path.with_suffix(att_path.suffix + ".tmp")
        np.save(att_tmp, result.attention)
        # np.save appends .npy to paths without the suffix
        saved = att_tmp if att_tmp.exists() else att_tmp.with_suffix(att_tmp.suffix + ".npy")
        saved.replace(att_path)
    flag = " (truncated at the step cap)" if result.truncated else ""
    print(f"wrote {out}: {result.waveform.shape[0]} samples, "
          f"{result.mel.n_frames} frames{flag}")
    return EXIT_OK


def _cmd_eval_classifier(args) -> int:
    manifest = load_manifest(args.corpus)
    if args.dim < 0 or args.dim >= manifest.n_dims:
        raise DataError(f"dimension index {args.dim} out of range "
                        f"(corpus has {manifest.n_dims})")
    cfg = EvalClassifierConfig(steps=args.steps, seed=args.seed, n_mel=args.mel_bins)
    dsp = DspConfig(mel_bins=args.mel_bins)
    train_split, val_split, _ = split_manifest(manifest, DEFAULT_SPLIT, SPLIT_SEED)
    clf, val_acc = train_eval_classifier(CorpusData(train_split, dsp),
                                         CorpusData(val_split, dsp),
                                         args.dim, cfg)
    save_eval_classifier(clf, args.out, val_acc)
    print(f"dimension {args.dim} ({manifest.dimensions[args.dim].name}) "
          f"validation accuracy: {val_acc:.4f}")
    return EXIT_OK


def _cmd_eval_transfer(args) -> int:
    model, meta = load_model_checkpoint(args.ckpt)
    clf1, _ = load_eval_classifier(args.cls1)
    clf2, _ = load_eval_classifier(args.cls2)
    manifest = load_manifest(args.corpus)
    _, _, test_split = split_manifest(manifest, DEFAULT_SPLIT, SPLIT_SEED)
    dsp = DspConfig(**{**dataclasses.asdict(DspConfig()), **meta.get("dsp", {})})
    report = transfer_accuracy(model, meta, {0: clf1, 1: clf2},
                               CorpusData(test_split, dsp), seed=args.seed,
                               n_texts=args.n_texts)
    report.save_json(args.report)
    if args.confusion_png:
        report.confusion.render_png(args.confusion_png)
    if args.embeddings_out:
        write_embeddings_tsv(args.embeddings_out, report.embedding_labels,
                             report.embeddings)
    for name, acc in report.accuracy.items():
        print(f"{name} transfer accuracy: {acc:.4f}")
    return EXIT_OK


def _cmd_export_embeddings(args) -> int:
    clf, _ = load_eval_classifier(args.cls)
    manifest = load_manifest(args.corpus)
    dsp = DspConfig(mel_bins=clf.cfg.n_mel)
    data = CorpusData(manifest, dsp)
    dim = clf.dimension
    rng = np.random.default_rng(args.seed)
    mels_by_class: dict[str, list[np.ndarray]] = {}
    for cname in manifest.dimensions[dim].classes:
        cid = manifest.dimensions[dim].class_id(cname)
        recs = sorted(manifest.records_with_class(dim, cid), key=lambda r: r.utt_id)
        order = rng.permutation(len(recs))[:args.n]
        mels_by_class[cname] = [data.mel(recs[i]) for i in order]
    labels, embeddings = export_embeddings(clf, mels_by_class, args.n)
    write_embeddings_tsv(args.out, labels, embeddings)
    if args.plot:
        plot_embeddings(labels, embeddings, args.plot, seed=args.seed)
    print(f"wrote {len(labels)} embeddings to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "train": _cmd_train,
    "synth": _cmd_synth,
    "eval-classifier": _cmd_eval_classifier,
    "eval-transfer": _cmd_eval_transfer,
    "export-embeddings": _cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    # tiny per-op tensors: thread sync costs more than it buys
    import os

    import torch
    torch.set_num_threads(int(os.environ.get("CYCLETTS_THREADS", "1")))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
