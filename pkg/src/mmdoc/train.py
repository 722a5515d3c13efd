"""Optimization and task runners: AdamW with linear warmup and global-norm
clipping, bit-exact checkpointing, the pre-training loop, fine-tuning for
sequence labeling and document classification, and their evaluations.

All randomness inside a run is derived from (seed, epoch, batch) rather
than drawn from a shared stream, so resuming from a checkpoint at any step
boundary reproduces the original trajectory bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, OptimConfig, RunConfig, to_flat_dict, apply_flat
from .features import Prepared, Vocab, prepare_document
from .metrics import classification_accuracy, sequence_labeling_metrics
from .model import Model
from .pretrain import (
    init_pretrain_heads,
    make_batch_items,
    pretrain_head_dict,
    pretrain_loss,
)


class DivergenceError(RuntimeError):
    """Training produced NaN; aborted with the last good checkpoint."""


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def trainable(params: dict) -> dict:
    return {k: p for k, p in params.items() if p.requires_grad}


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


def clip_gradients(params: dict, max_norm: float = 1.0) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def adamw_step(params: dict, state: AdamState, cfg: OptimConfig, lr: float) -> None:
    """Decoupled-weight-decay Adam with bias-corrected moments."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear 0 -> base_lr over the warmup fraction, constant afterwards."""
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    return base_lr


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + params.bin (binary dump format per tensor)

def save_checkpoint(
    ckpt_dir,
    named_tensors: dict,
    opt_state: AdamState,
    run_cfg: RunConfig,
    vocab: Vocab,
    step: int,
    epoch: int,
    batch_in_epoch: int,
    rng_state: dict | None = None,
) -> str:
    os.makedirs(ckpt_dir, exist_ok=True)
    arrays = {name: t.data for name, t in sorted(named_tensors.items())}
    for pname in sorted(opt_state.m):
        arrays[f"opt.m.{pname}"] = opt_state.m[pname]
        arrays[f"opt.v.{pname}"] = opt_state.v[pname]
    entries = []
    blob_path = os.path.join(ckpt_dir, "params.bin")
    with open(blob_path, "wb") as f:
        for name, arr in arrays.items():
            offset = f.tell()
            T.dump_array(f, arr)
            entries.append(
                {"name": name, "shape": list(arr.shape), "offset": offset,
                 "nbytes": f.tell() - offset}
            )
    vocab.save(os.path.join(ckpt_dir, "vocab.txt"))
    manifest = {
        "format": 1,
        "step": step,
        "epoch": epoch,
        "batch_in_epoch": batch_in_epoch,
        "opt_t": opt_state.t,
        "rng": rng_state,
        "config": to_flat_dict(run_cfg),
        "tensors": entries,
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return str(ckpt_dir)


@dataclass
class Checkpoint:
    arrays: dict
    config: RunConfig
    vocab: Vocab
    step: int
    epoch: int
    batch_in_epoch: int
    opt_t: int
    rng: dict | None

    def model_arrays(self) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith(("feat.", "enc."))}

    def head_arrays(self) -> dict:
        return {k: v for k, v in self.arrays.items() if k.startswith("head.")}

    def optimizer_state(self) -> AdamState:
        state = AdamState(t=self.opt_t)
        for k, v in self.arrays.items():
            if k.startswith("opt.m."):
                state.m[k[len("opt.m."):]] = v.copy()
            elif k.startswith("opt.v."):
                state.v[k[len("opt.v."):]] = v.copy()
        return state


def load_checkpoint(ckpt_dir) -> Checkpoint:
    with open(os.path.join(ckpt_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = {}
    with open(os.path.join(ckpt_dir, "params.bin"), "rb") as f:
        for e in manifest["tensors"]:
            f.seek(e["offset"])
            arr = T.load_array(f)
            if list(arr.shape) != e["shape"]:
                raise T.ShapeError(f"tensor {e['name']}: dump shape {arr.shape} vs manifest {e['shape']}")
            arrays[e["name"]] = arr
    cfg = apply_flat(RunConfig(), manifest["config"])
    vocab = Vocab.load(os.path.join(ckpt_dir, "vocab.txt"))
    return Checkpoint(
        arrays=arrays,
        config=cfg,
        vocab=vocab,
        step=manifest["step"],
        epoch=manifest["epoch"],
        batch_in_epoch=manifest["batch_in_epoch"],
        opt_t=manifest.get("opt_t", manifest["step"]),
        rng=manifest.get("rng"),
    )


def model_from_checkpoint(ckpt: Checkpoint, cfg_override: ModelConfig | None = None) -> Model:
    cfg = cfg_override or ckpt.config.model
    model = Model.init(cfg, ckpt.vocab, T.Rng(ckpt.config.seed))
    model.load_state(ckpt.model_arrays())
    return model


# ---------------------------------------------------------------------------
# Pre-training

def _batches(n: int, batch_size: int):
    return [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]


class PretrainRun:
    """Stateful pre-training loop, resumable at any step boundary."""

    def __init__(self, run_cfg: RunConfig, docs, vocab: Vocab, out_dir=None, preps=None):
        run_cfg.validate()
        self.cfg = run_cfg
        self.vocab = vocab
        self.out_dir = out_dir
        root = T.Rng(run_cfg.seed)
        self.model = Model.init(run_cfg.model, vocab, root.derive(0xA))
        self.heads = init_pretrain_heads(root.derive(0xB), run_cfg.model, vocab.size)
        self.preps = preps or [prepare_document(d, vocab, run_cfg.model) for d in docs]
        self.params = {**self.model.parameters(), **pretrain_head_dict(self.heads)}
        self.opt = AdamState()
        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        self.batches = _batches(len(self.preps), run_cfg.batch_size)
        self.total_steps = max(1, run_cfg.epochs * len(self.batches))
        self.last_checkpoint = None

    @classmethod
    def from_checkpoint(cls, ckpt_dir, docs, out_dir=None) -> "PretrainRun":
        ckpt = load_checkpoint(ckpt_dir)
        run = cls(ckpt.config, docs, ckpt.vocab, out_dir=out_dir)
        full = {**run.model.parameters(), **pretrain_head_dict(run.heads)}
        for name, tensor in full.items():
            tensor.data[...] = ckpt.arrays[name]
        run.opt = ckpt.optimizer_state()
        run.step = ckpt.step
        run.epoch = ckpt.epoch
        run.batch_in_epoch = ckpt.batch_in_epoch
        return run

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return T.Rng(T.mix_seed(self.cfg.seed, 0xC, epoch)).shuffled(len(self.preps))

    def done(self) -> bool:
        return self.epoch >= self.cfg.epochs

    def run_step(self) -> dict:
        """One optimizer step (one batch); returns the JSON-able log record."""
        t0 = time.perf_counter()
        cfg = self.cfg
        order = self._epoch_order(self.epoch)
        batch = [self.preps[order[i]] for i in self.batches[self.batch_in_epoch]]
        item_rng = T.Rng(T.mix_seed(cfg.seed, 0xD, self.epoch, self.batch_in_epoch))
        items = make_batch_items(
            batch, item_rng, self.vocab.size, cfg.mlm_rate, cfg.tdi_mismatch_rate
        )
        zero_grads(self.params)
        sums = {"total": 0.0, "mlm": 0.0, "ltr": 0.0, "tdi": 0.0}
        for k, item in enumerate(items):
            drop_rng = item_rng.derive(0xDD, k)  # consumed only when dropout is on
            with T.Tape():
                total, comps = pretrain_loss(item, self.model, self.heads, cfg.loss,
                                             rng=drop_rng)
                if not np.isfinite(total.data):
                    raise DivergenceError(
                        f"total loss is not finite at step {self.step + 1} "
                        f"(last good checkpoint: {self.last_checkpoint})"
                    )
                if total.node_id is not None:
                    T.backward(total)
            for k in sums:
                sums[k] += comps[k]
        scale = 1.0 / len(items)
        for p in self.params.values():
            if p.grad is not None:
                p.grad *= scale
        norm = clip_gradients(trainable(self.params), cfg.optim.clip_norm)
        self.step += 1
        lr = lr_schedule(self.step, self.total_steps, cfg.optim.lr, cfg.optim.warmup_fraction)
        if norm > 0.0:  # a batch with no gradient signal must not move parameters
            adamw_step(self.params, self.opt, cfg.optim, lr)
        elapsed = time.perf_counter() - t0
        record = {
            "step": self.step,
            "total": sums["total"] * scale,
            "mlm": sums["mlm"] * scale,
            "ltr": sums["ltr"] * scale,
            "tdi": sums["tdi"] * scale,
            "lr": lr,
            "seconds": elapsed,
        }
        self.batch_in_epoch += 1
        if self.batch_in_epoch >= len(self.batches):
            self.batch_in_epoch = 0
            self.epoch += 1
        return record

    def save(self, ckpt_dir) -> str:
        self.last_checkpoint = save_checkpoint(
            ckpt_dir,
            self.params,
            self.opt,
            self.cfg,
            self.vocab,
            self.step,
            self.epoch,
            self.batch_in_epoch,
        )
        return self.last_checkpoint

    def run(self, log_fn=None, checkpoint_each_epoch: bool = True) -> str | None:
        """Train to completion; saves epoch checkpoints under out_dir."""
        while not self.done():
            epoch_before = self.epoch
            record = self.run_step()
            if log_fn:
                log_fn(record)
            if self.out_dir and checkpoint_each_epoch and self.epoch != epoch_before:
                self.save(os.path.join(self.out_dir, f"epoch{self.epoch:03d}"))
        if self.out_dir:
            return self.save(os.path.join(self.out_dir, "final"))
        return self.last_checkpoint


# ---------------------------------------------------------------------------
# Fine-tuning heads

@dataclass
class SequenceHead:
    variant: str
    w1: T.Tensor
    b1: T.Tensor
    ln_g: T.Tensor | None
    ln_b: T.Tensor | None
    w2: T.Tensor | None
    b2: T.Tensor | None

    def apply(self, mbar: T.Tensor) -> T.Tensor:
        if self.variant == "linear":
            return T.add(T.matmul(mbar, self.w1), self.b1)
        h = T.relu(T.add(T.matmul(mbar, self.w1), self.b1))
        h = T.layer_norm(h, self.ln_g, self.ln_b)
        return T.add(T.matmul(h, self.w2), self.b2)


def init_sequence_head(rng: T.Rng, d: int, n_classes: int, variant: str) -> SequenceHead:
    def p(shape, std=0.02):
        return T.Tensor(rng.normal(shape, std=std), requires_grad=True)

    def z(shape):
        return T.Tensor(np.zeros(shape), requires_grad=True)

    if variant == "linear":
        return SequenceHead("linear", p((d, n_classes)), z((n_classes,)), None, None, None, None)
    return SequenceHead(
        "deeper", p((d, d)), z((d,)),
        T.Tensor(np.ones(d), requires_grad=True), z((d,)),
        p((d, n_classes)), z((n_classes,)),
    )


def sequence_head_dict(head: SequenceHead) -> dict:
    out = {"fthead.w1": head.w1, "fthead.b1": head.b1}
    if head.variant == "deeper":
        out.update(
            {"fthead.ln_g": head.ln_g, "fthead.ln_b": head.ln_b,
             "fthead.w2": head.w2, "fthead.b2": head.b2}
        )
    return out


@dataclass
class ClassificationHead:
    """Sequence-start pooling (linear -> ReLU -> linear) to class logits."""

    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    def apply(self, mbar: T.Tensor) -> T.Tensor:
        cls = T.slice(mbar, np.s_[0:1, :])
        h = T.relu(T.add(T.matmul(cls, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


def init_classification_head(rng: T.Rng, d: int, n_classes: int) -> ClassificationHead:
    def p(shape, std=0.02):
        return T.Tensor(rng.normal(shape, std=std), requires_grad=True)

    def z(shape):
        return T.Tensor(np.zeros(shape), requires_grad=True)

    return ClassificationHead(p((d, d)), z((d,)), p((d, n_classes)), z((n_classes,)))


def classification_head_dict(head: ClassificationHead) -> dict:
    return {"fthead.w1": head.w1, "fthead.b1": head.b1,
            "fthead.w2": head.w2, "fthead.b2": head.b2}


# ---------------------------------------------------------------------------
# Fine-tuning loops

def _sequence_loss(model: Model, head: SequenceHead, prep: Prepared, rng=None):
    mbar, _, _ = model.forward(prep, rng=rng)
    logits = head.apply(mbar)
    sel = np.flatnonzero(prep.labels >= 0)
    if sel.size == 0:
        return T.Tensor(0.0)
    picked = T.embedding_lookup(logits, sel)
    return T.mean(T.cross_entropy_from_logits(picked, prep.labels[sel]))


def _classification_loss(model: Model, head: ClassificationHead, prep: Prepared, rng=None):
    if prep.doc_class is None:
        raise ValueError(f"document {prep.doc_id} has no class; cannot fine-tune")
    mbar, _, _ = model.forward(prep, rng=rng)
    logits = head.apply(mbar)
    return T.mean(T.cross_entropy_from_logits(logits, [prep.doc_class]))


def finetune(
    model: Model,
    head,
    preps: list[Prepared],
    run_cfg: RunConfig,
    task: str,
    epochs: int,
    log_fn=None,
    opt: AdamState | None = None,
    start_epoch: int = 0,
) -> AdamState:
    """Fine-tune all model components plus the head with AdamW at the
    fine-tune learning rate (no warmup). Returns the optimizer state so a
    caller can continue training later without a moment reset."""
    head_params = sequence_head_dict(head) if task == "seq" else classification_head_dict(head)
    params = {**model.parameters(), **head_params}
    opt = opt or AdamState()
    batches = _batches(len(preps), run_cfg.batch_size)
    total_steps = max(1, epochs * len(batches))
    loss_fn = _sequence_loss if task == "seq" else _classification_loss
    step = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        order = T.Rng(T.mix_seed(run_cfg.seed, 0xF7, epoch)).shuffled(len(preps))
        for bi, batch in enumerate(batches):
            step += 1
            zero_grads(params)
            total = 0.0
            for i in batch:
                drop_rng = T.Rng(T.mix_seed(run_cfg.seed, 0xF8, epoch, bi, i))
                with T.Tape():
                    loss = loss_fn(model, head, preps[order[i]], rng=drop_rng)
                    if loss.node_id is not None:
                        T.backward(loss)
                total += float(loss.data)
            if not np.isfinite(total):
                raise DivergenceError(f"fine-tune loss not finite at step {step}")
            for p in params.values():
                if p.grad is not None:
                    p.grad /= len(batch)
            clip_gradients(trainable(params), run_cfg.optim.clip_norm)
            lr = lr_schedule(
                step, total_steps, run_cfg.finetune_lr, run_cfg.finetune_warmup_fraction
            )
            adamw_step(params, opt, run_cfg.optim, lr)
            if log_fn:
                log_fn({"step": step, "loss": total / len(batch), "lr": lr})
    return opt


def predict_sequence(model: Model, head: SequenceHead, prep: Prepared) -> np.ndarray:
    mbar, _, _ = model.forward(prep)
    logits = head.apply(mbar).data
    return logits.argmax(axis=1)


def evaluate_sequence_labeling(model, head, preps, classes=None) -> dict:
    gold, pred = [], []
    for prep in preps:
        gold.append(prep.labels)
        pred.append(predict_sequence(model, head, prep))
    return sequence_labeling_metrics(gold, pred, classes=classes)


def predict_class(model: Model, head: ClassificationHead, prep: Prepared) -> int:
    mbar, _, _ = model.forward(prep)
    return int(head.apply(mbar).data.argmax())


def evaluate_classification(model, head, preps) -> dict:
    gold, pred = [], []
    for prep in preps:
        if prep.doc_class is None:
            raise ValueError(f"document {prep.doc_id} has no class label")
        gold.append(prep.doc_class)
        pred.append(predict_class(model, head, prep))
    return classification_accuracy(gold, pred)
