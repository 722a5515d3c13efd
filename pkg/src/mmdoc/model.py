"""Model assembly: feature parameters plus the encoder stack, addressable
as one flat name -> tensor mapping for optimizers and checkpoints."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import encoder_forward, encoder_param_dict, init_encoder_params
from .features import (
    FeatureParams,
    Prepared,
    Vocab,
    embed_bundle,
    feature_param_dict,
    init_feature_params,
)


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, feat: FeatureParams, layers: list):
        self.cfg = cfg
        self.vocab = vocab
        self.feat = feat
        self.layers = layers

    @classmethod
    def init(cls, cfg: ModelConfig, vocab: Vocab, rng: T.Rng) -> "Model":
        cfg.validate()
        return cls(
            cfg,
            vocab,
            init_feature_params(rng.derive(1), cfg, vocab.size),
            init_encoder_params(rng.derive(2), cfg),
        )

    def parameters(self) -> dict[str, T.Tensor]:
        out = feature_param_dict(self.feat)
        out.update(encoder_param_dict(self.layers))
        return out

    def parameter_count(self) -> int:
        return int(np.sum([t.data.size for t in self.parameters().values()]))

    def forward(
        self,
        prep: Prepared,
        token_ids: np.ndarray | None = None,
        image_input: T.Tensor | None = None,
        collect_attention: bool = False,
        rng: T.Rng | None = None,
    ):
        """Embed one prepared document and run the encoder. Returns
        (multi-modal stream [N,d], bundle, per-layer attention). rng turns
        on train-mode dropout at cfg.dropout; omit it for evaluation."""
        bundle = embed_bundle(self.feat, self.cfg, prep, token_ids, image_input)
        mbar, attn = encoder_forward(self.layers, bundle, self.cfg, collect_attention, rng)
        return mbar, bundle, attn

    def zero_visual_values(self) -> None:
        """Cut the visual pathway: zero and freeze every visual value
        projection, so the merged context is the text branch alone."""
        for lp in self.layers:
            lp.v_v.data[:] = 0.0
            lp.v_v.requires_grad = False

    def load_state(self, named_arrays: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(named_arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
        for name, tensor in params.items():
            arr = named_arrays[name]
            if arr.shape != tensor.data.shape:
                raise T.ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} vs model {tensor.data.shape}"
                )
            tensor.data[...] = arr
