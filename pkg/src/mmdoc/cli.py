"""Command-line surface.

Subcommands: generate, build-vocab, pretrain, finetune, evaluate, predict,
export-attention. Every RunConfig key is exposed as a dotted flag
(e.g. --model.d); precedence is flag > --config file > default. Failures
print one JSON object to stderr and exit 2 (config), 3 (data) or
4 (numeric divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, apply_flat, load_config_file, to_flat_dict
from .docdata import DataError, load_corpus, load_document
from .features import Vocab, prepare_document
from .model import Model
from .synthgen import LABEL_NAMES, generate_synthetic_corpus, write_corpus
from .train import (
    DivergenceError,
    PretrainRun,
    classification_head_dict,
    evaluate_classification,
    evaluate_sequence_labeling,
    finetune,
    init_classification_head,
    init_sequence_head,
    load_checkpoint,
    model_from_checkpoint,
    predict_class,
    predict_sequence,
    save_checkpoint,
    sequence_head_dict,
    AdamState,
)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _parse_ints(s: str):
    return [int(v) for v in s.split(",") if v != ""]


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="JSON config file (flat dotted keys)")
    group = parser.add_argument_group("config keys (override file and defaults)")
    for key, value in to_flat_dict(RunConfig()).items():
        flag = f"--{key}"
        if isinstance(value, bool):
            group.add_argument(flag, dest=key, type=_parse_bool, default=None,
                               metavar="BOOL", help=f"default {value}")
        elif isinstance(value, int):
            group.add_argument(flag, dest=key, type=int, default=None,
                               metavar="INT", help=f"default {value}")
        elif isinstance(value, float):
            group.add_argument(flag, dest=key, type=float, default=None,
                               metavar="FLOAT", help=f"default {value}")
        elif isinstance(value, list):
            group.add_argument(flag, dest=key, type=_parse_ints, default=None,
                               metavar="I,J,...", help=f"default {value}")
        else:
            group.add_argument(flag, dest=key, type=str, default=None,
                               metavar="STR", help=f"default {value!r}")


def build_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    overrides = {}
    for key in to_flat_dict(RunConfig()):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = apply_flat(cfg, overrides)
    cfg.validate()
    return cfg


def _load_split(manifest_path, split=None):
    pairs = load_corpus(manifest_path)
    if split is None:
        return [d for d, _ in pairs]
    return [d for d, s in pairs if s == split]


def _corpus_meta(manifest_path) -> dict:
    meta_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    return {}


def _n_classes(meta: dict, docs, task: str) -> int:
    if task == "seq":
        if "n_labels" in meta:
            return int(meta["n_labels"])
        return max(w.label for d in docs for w in d.words if w.label is not None) + 1
    if "n_doc_classes" in meta:
        return int(meta["n_doc_classes"])
    return max(d.doc_class for d in docs if d.doc_class is not None) + 1


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    cfg = build_run_config(args)
    rng = T.Rng(cfg.seed)
    corpus = generate_synthetic_corpus(
        rng, args.docs, page=(args.page, args.page), test_fraction=args.test_fraction
    )
    os.makedirs(args.out, exist_ok=True)
    manifest = write_corpus(corpus, args.out)
    print(json.dumps({"manifest": manifest, "docs": args.docs}))
    return 0


def cmd_build_vocab(args) -> int:
    cfg = build_run_config(args)
    docs = _load_split(args.manifest, "train")
    if not docs:
        raise DataError(f"{args.manifest}: no train documents to build a vocabulary from")
    vocab = Vocab.build(
        (w.text for d in docs for w in d.words), max_size=cfg.model.vocab_cap
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    vocab.save(args.out)
    print(json.dumps({"vocab": args.out, "size": vocab.size}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_run_config(args)
    docs = _load_split(args.manifest, "train")
    if not docs:
        raise DataError(f"{args.manifest}: no train documents")
    vocab = Vocab.load(args.vocab)
    os.makedirs(args.out, exist_ok=True)
    run = PretrainRun(cfg, docs, vocab, out_dir=args.out)
    log_path = os.path.join(args.out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def log_fn(record):
            log.write(json.dumps(record) + "\n")

        final = run.run(log_fn=log_fn)
    print(json.dumps({"checkpoint": final, "steps": run.step, "log": log_path}))
    return 0


def _build_finetune_model(args, cfg, vocab_override=None):
    """Model for fine-tuning. With --checkpoint the model section comes from
    the checkpoint; explicit model.* flags that contradict it are an error
    reporting the exact dimension diff."""
    if args.checkpoint:
        if getattr(args, "scratch", False):
            raise ConfigError("--checkpoint and --scratch are mutually exclusive")
        ckpt = load_checkpoint(args.checkpoint)
        ckpt_model = {k: v for k, v in to_flat_dict(ckpt.config).items() if k.startswith("model.")}
        explicit = {
            k: getattr(args, k)
            for k in ckpt_model
            if getattr(args, k, None) is not None
        }
        diffs = {k: {"checkpoint": ckpt_model[k], "requested": v}
                 for k, v in explicit.items()
                 if (list(v) if isinstance(v, (list, tuple)) else v) != ckpt_model[k]}
        if diffs:
            raise ConfigError(f"checkpoint/config dimension mismatch: {json.dumps(diffs)}")
        cfg.model = ckpt.config.model
        return model_from_checkpoint(ckpt), ckpt.vocab
    if not vocab_override:
        raise ConfigError("fine-tuning from scratch requires --vocab")
    vocab = Vocab.load(vocab_override)
    return Model.init(cfg.model, vocab, T.Rng(cfg.seed).derive(0xA)), vocab


def cmd_finetune(args) -> int:
    cfg = build_run_config(args)
    train_docs = _load_split(args.manifest, "train")
    test_docs = _load_split(args.manifest, "test")
    if not train_docs:
        raise DataError(f"{args.manifest}: no train documents")
    meta = _corpus_meta(args.manifest)
    model, vocab = _build_finetune_model(args, cfg, vocab_override=args.vocab)
    if args.zero_visual_values:
        model.zero_visual_values()
    n_classes = _n_classes(meta, train_docs, args.task)
    head_rng = T.Rng(cfg.seed).derive(0xE)
    if args.task == "seq":
        head = init_sequence_head(head_rng, cfg.model.d, n_classes, cfg.head_variant)
        head_params = sequence_head_dict(head)
    else:
        head = init_classification_head(head_rng, cfg.model.d, n_classes)
        head_params = classification_head_dict(head)

    train_preps = [prepare_document(d, vocab, cfg.model) for d in train_docs]
    finetune(model, head, train_preps, cfg, task=args.task, epochs=cfg.finetune_epochs)

    os.makedirs(args.out, exist_ok=True)
    named = {**model.parameters(), **head_params}
    save_checkpoint(
        args.out, named, AdamState(), cfg, vocab,
        step=0, epoch=0, batch_in_epoch=0,
        rng_state=None,
    )
    with open(os.path.join(args.out, "task.json"), "w", encoding="utf-8") as f:
        json.dump({"task": args.task, "n_classes": n_classes,
                   "zero_visual_values": bool(args.zero_visual_values)}, f)
        f.write("\n")

    metrics = {"param_count": model.parameter_count()}
    if test_docs:
        test_preps = [prepare_document(d, vocab, cfg.model) for d in test_docs]
        if args.task == "seq":
            metrics.update(evaluate_sequence_labeling(model, head, test_preps))
        else:
            metrics.update(evaluate_classification(model, head, test_preps))
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(metrics))
    return 0


def _load_finetuned(ckpt_dir):
    ckpt = load_checkpoint(ckpt_dir)
    task_path = os.path.join(ckpt_dir, "task.json")
    if not os.path.exists(task_path):
        raise DataError(f"{ckpt_dir}: not a fine-tuned checkpoint (task.json missing)")
    with open(task_path, "r", encoding="utf-8") as f:
        task_info = json.load(f)
    model = model_from_checkpoint(ckpt)
    if task_info.get("zero_visual_values"):
        model.zero_visual_values()
    d = ckpt.config.model.d
    n_classes = int(task_info["n_classes"])
    if task_info["task"] == "seq":
        head = init_sequence_head(T.Rng(0), d, n_classes, ckpt.config.head_variant)
        params = sequence_head_dict(head)
    else:
        head = init_classification_head(T.Rng(0), d, n_classes)
        params = classification_head_dict(head)
    for name, tensor in params.items():
        tensor.data[...] = ckpt.arrays[name]
    return model, head, ckpt, task_info


def cmd_evaluate(args) -> int:
    model, head, ckpt, task_info = _load_finetuned(args.checkpoint)
    docs = _load_split(args.manifest, args.split)
    if not docs:
        raise DataError(f"{args.manifest}: no documents in split {args.split!r}")
    task = task_info["task"]
    if task == "seq":
        if all(w.label is None for d in docs for w in d.words):
            raise DataError(f"{args.manifest}: split {args.split!r} carries no token labels")
        preps = [prepare_document(d, ckpt.vocab, ckpt.config.model) for d in docs]
        classes = _parse_ints(args.classes) if args.classes else None
        metrics = evaluate_sequence_labeling(model, head, preps, classes=classes)
    else:
        if all(d.doc_class is None for d in docs):
            raise DataError(f"{args.manifest}: split {args.split!r} carries no class labels")
        preps = [prepare_document(d, ckpt.vocab, ckpt.config.model) for d in docs]
        metrics = evaluate_classification(model, head, preps)
    print(json.dumps(metrics, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_predict(args) -> int:
    model, head, ckpt, task_info = _load_finetuned(args.checkpoint)
    doc = load_document(args.ocr, args.image)
    prep = prepare_document(doc, ckpt.vocab, ckpt.config.model)
    if task_info["task"] == "seq":
        token_labels = predict_sequence(model, head, prep)
        words = []
        seen = set()
        for pos, wi in enumerate(prep.word_index):
            if wi < 0 or wi in seen:
                continue
            seen.add(wi)
            lab = int(token_labels[pos])
            name = LABEL_NAMES[lab] if lab < len(LABEL_NAMES) else str(lab)
            words.append({"text": doc.words[wi].text, "label": lab, "label_name": name})
        print(json.dumps({"id": doc.id, "words": words}))
    else:
        print(json.dumps({"id": doc.id, "class": predict_class(model, head, prep)}))
    return 0


def cmd_export_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = ckpt.config.model
    if not 0 <= args.layer < cfg.layers:
        raise ConfigError(f"layer {args.layer} out of range [0, {cfg.layers})")
    if not 0 <= args.head < cfg.heads:
        raise ConfigError(f"head {args.head} out of range [0, {cfg.heads})")
    doc = load_document(args.ocr, args.image)
    prep = prepare_document(doc, ckpt.vocab, cfg)
    _, _, attn = model.forward(prep, collect_attention=True)
    grid = attn[args.layer][0][args.head]  # text-branch probabilities [N, N]
    os.makedirs(os.path.dirname(os.path.abspath(args.out_prefix)) or ".", exist_ok=True)
    raw_path = args.out_prefix + ".bin"
    with open(raw_path, "wb") as f:
        T.dump_array(f, grid)
    p_max = float(grid.max())
    pixels = np.round(255.0 * (1.0 - grid / p_max)).astype(np.uint8)
    from .docdata import write_pgm

    pgm_path = args.out_prefix + ".pgm"
    write_pgm(pgm_path, pixels)
    print(json.dumps({"raw": raw_path, "pgm": pgm_path, "layer": args.layer, "head": args.head}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmdoc",
        description="Desk-scale multi-modal document encoder: corpus generation, "
        "pre-training, fine-tuning, evaluation, prediction, attention export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--page", type=int, default=256)
    p.add_argument("--test-fraction", type=float, default=1 / 6)
    add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-vocab", help="build a subword vocabulary from the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="run the three-task pre-training loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for sequence labeling or classification")
    p.add_argument("--task", choices=("seq", "cls"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="pre-trained checkpoint to start from")
    p.add_argument("--vocab", help="vocab file (training from scratch)")
    p.add_argument("--scratch", action="store_true", help="train from random initialization")
    p.add_argument("--zero-visual-values", action="store_true",
                   help="zero and freeze visual value projections (text+spatial ablation)")
    add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--classes", help="comma-separated label ids to restrict entity metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict labels or class for one document")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ocr", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-attention", help="export text-branch attention as dump + PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ocr", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_export_attention)

    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail("config", str(e), 2)
    except T.ShapeError as e:
        return _fail("config", str(e), 2)
    except DataError as e:
        return _fail("data", str(e), 3)
    except DivergenceError as e:
        return _fail("divergence", str(e), 4)
    except FileNotFoundError as e:
        return _fail("data", str(e), 3)


if __name__ == "__main__":
    sys.exit(main())
