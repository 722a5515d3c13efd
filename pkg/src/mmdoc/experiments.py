"""Toy-scale ablation experiments.

Three directional questions on the synthetic corpus, seed-averaged:
  1. does pre-training beat training from scratch on entity F1,
  2. does the full multi-modal model beat a text+spatial-only variant
     (visual value projections zeroed and frozen) on the labels that are
     decidable only from the raster,
  3. does unsharing the spatial projections grow the parameter count by
     exactly 2*d^2 per layer without buying F1 beyond noise.

The model here is deliberately small so a full sweep (pre-train plus four
fine-tunes, three seeds) stays within a laptop-CPU half hour.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, RunConfig
from .features import Vocab, prepare_document
from .model import Model
from .synthgen import VISION_DEPENDENT_CLASSES, generate_synthetic_corpus
from .train import (
    PretrainRun,
    evaluate_sequence_labeling,
    finetune,
    init_sequence_head,
)

N_LABEL_CLASSES = 4


def ablation_model_config(share_spatial: bool = True) -> ModelConfig:
    return ModelConfig(
        d=32,
        n_tokens=32,
        layers=2,
        heads=2,
        span=8,
        num_bins=64,
        image_size=64,
        cnn_channels=(8, 16, 32),
        token_grid=(4, 8),
        share_spatial_weights=share_spatial,
    )


@dataclass
class AblationSettings:
    """Protocol: 5 pre-training epochs, then every arm fine-tunes with the
    same recipe. The pretrain-vs-scratch and multimodal-vs-text+spatial
    comparisons read out at `finetune_epochs` (mid-climb for scratch); the
    spatial-sharing comparison reads out at `sharing_epochs`, where both
    variants have converged and seed noise is small."""

    n_train: int = 500
    n_test: int = 100
    seeds: tuple[int, ...] = (1, 2, 3)
    corpus_seed: int = 2024
    pretrain_epochs: int = 5
    finetune_epochs: int = 8
    sharing_epochs: int = 12
    batch_size: int = 8
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-3
    head_variant: str = "linear"


def _run_config(settings: AblationSettings, seed: int, share_spatial: bool = True) -> RunConfig:
    cfg = RunConfig(
        model=ablation_model_config(share_spatial),
        seed=seed,
        epochs=settings.pretrain_epochs,
        batch_size=settings.batch_size,
        head_variant=settings.head_variant,
        finetune_lr=settings.finetune_lr,
        finetune_epochs=settings.finetune_epochs,
    )
    cfg.optim.lr = settings.pretrain_lr
    cfg.validate()
    return cfg


def _snapshot(model: Model) -> dict:
    return {k: t.data.copy() for k, t in model.parameters().items()}


def _score(model, head, test_preps) -> dict:
    overall = evaluate_sequence_labeling(model, head, test_preps)
    subset = evaluate_sequence_labeling(
        model, head, test_preps, classes=VISION_DEPENDENT_CLASSES
    )
    return {
        "f1": 100.0 * overall["f1"],
        "vision_f1": 100.0 * subset["f1"],
        "token_accuracy": overall["token_accuracy"],
        "param_count": model.parameter_count(),
    }


def _finetune_staged(model, cfg, train_preps, test_preps, seed, epoch_marks) -> list[dict]:
    """One continuous fine-tune scored at each epoch mark (ascending);
    optimizer moments carry across marks, so marks only add evaluations."""
    head = init_sequence_head(T.Rng(seed).derive(0xE), cfg.model.d, N_LABEL_CLASSES,
                              cfg.head_variant)
    scores = []
    done = 0
    opt = None
    for mark in epoch_marks:
        opt = finetune(model, head, train_preps, cfg, task="seq",
                       epochs=mark - done, opt=opt, start_epoch=done)
        done = mark
        scores.append(_score(model, head, test_preps))
    return scores


def run_seed(settings: AblationSettings, seed: int, train_docs, test_docs,
             vocab: Vocab, log=None) -> dict:
    """All four training arms for one seed; returns their scores."""
    def say(msg):
        if log:
            log(f"[seed {seed}] {msg}")

    cfg = _run_config(settings, seed)
    train_preps = [prepare_document(d, vocab, cfg.model) for d in train_docs]
    test_preps = [prepare_document(d, vocab, cfg.model) for d in test_docs]
    ft, sh = settings.finetune_epochs, settings.sharing_epochs

    t0 = time.perf_counter()
    pre = PretrainRun(cfg, train_docs, vocab, preps=train_preps)
    while not pre.done():
        rec = pre.run_step()
        if rec["step"] % 100 == 0:
            say(f"pretrain step {rec['step']}/{pre.total_steps} total={rec['total']:.3f}")
    pretrained = _snapshot(pre.model)
    say(f"pretrain done in {time.perf_counter() - t0:.0f}s")

    results = {}

    model = Model.init(cfg.model, vocab, T.Rng(seed).derive(0xA))
    model.load_state(pretrained)
    results["pretrained_mm"] = _finetune_staged(
        model, cfg, train_preps, test_preps, seed, [ft])[0]
    say(f"pretrained_mm f1={results['pretrained_mm']['f1']:.2f} "
        f"vision_f1={results['pretrained_mm']['vision_f1']:.2f}")

    model = Model.init(cfg.model, vocab, T.Rng(seed).derive(0xA))
    at_ft, at_sh = _finetune_staged(model, cfg, train_preps, test_preps, seed, [ft, sh])
    results["scratch_mm"] = at_ft
    results["scratch_shared_converged"] = at_sh
    say(f"scratch_mm f1={at_ft['f1']:.2f} (converged {at_sh['f1']:.2f})")

    model = Model.init(cfg.model, vocab, T.Rng(seed).derive(0xA))
    model.load_state(pretrained)
    model.zero_visual_values()
    results["text_spatial"] = _finetune_staged(
        model, cfg, train_preps, test_preps, seed, [ft])[0]
    say(f"text_spatial vision_f1={results['text_spatial']['vision_f1']:.2f}")

    cfg_unshared = _run_config(settings, seed, share_spatial=False)
    model = Model.init(cfg_unshared.model, vocab, T.Rng(seed).derive(0xA))
    results["scratch_unshared_converged"] = _finetune_staged(
        model, cfg_unshared, train_preps, test_preps, seed, [sh])[0]
    say(f"scratch_unshared f1={results['scratch_unshared_converged']['f1']:.2f}")
    results["seconds"] = time.perf_counter() - t0
    return results


def run_toy_ablation(settings: AblationSettings | None = None, log=None) -> dict:
    """Full sweep; returns per-seed results and seed-averaged summary."""
    settings = settings or AblationSettings()
    corpus = generate_synthetic_corpus(
        T.Rng(settings.corpus_seed),
        settings.n_train + settings.n_test,
        test_fraction=settings.n_test / (settings.n_train + settings.n_test),
    )
    train_docs = corpus.split("train")
    test_docs = corpus.split("test")
    assert len(train_docs) == settings.n_train and len(test_docs) == settings.n_test
    vocab = Vocab.build(w.text for d in train_docs for w in d.words)

    t0 = time.perf_counter()
    per_seed = {s: run_seed(settings, s, train_docs, test_docs, vocab, log=log)
                for s in settings.seeds}

    def avg(variant, key):
        return float(np.mean([per_seed[s][variant][key] for s in settings.seeds]))

    cfg_s = ablation_model_config(True)
    summary = {
        "f1_pretrained_mm": avg("pretrained_mm", "f1"),
        "f1_scratch_mm": avg("scratch_mm", "f1"),
        "vision_f1_pretrained_mm": avg("pretrained_mm", "vision_f1"),
        "vision_f1_text_spatial": avg("text_spatial", "vision_f1"),
        "f1_shared_converged": avg("scratch_shared_converged", "f1"),
        "f1_unshared_converged": avg("scratch_unshared_converged", "f1"),
        "pretrain_gain": avg("pretrained_mm", "f1") - avg("scratch_mm", "f1"),
        "multimodal_gain": avg("pretrained_mm", "vision_f1") - avg("text_spatial", "vision_f1"),
        "unshared_gain": (
            avg("scratch_unshared_converged", "f1") - avg("scratch_shared_converged", "f1")
        ),
        "param_count_shared": per_seed[settings.seeds[0]]["scratch_mm"]["param_count"],
        "param_count_unshared": per_seed[settings.seeds[0]]["scratch_unshared_converged"]["param_count"],
        "expected_param_delta": 2 * cfg_s.d * cfg_s.d * cfg_s.layers,
        "total_seconds": time.perf_counter() - t0,
    }
    return {"per_seed": {str(k): v for k, v in per_seed.items()}, "summary": summary}
