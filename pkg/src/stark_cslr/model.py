"""The full recognizer: four stream encoders, stream fusion and decoding heads."""

from __future__ import annotations

import numpy as np

from . import ndiff as nd
from .config import StarkConfig, fingerprint
from .decoder import DECODING_STREAMS, HeadParams, NormState, fuse_streams, head_forward, init_head, stream_width, update_running
from .encoder import EncoderParams, encoder_forward, init_encoder
from .prep import STREAM_NAMES, StreamLayout


class StarkModel:
    def __init__(self, config: StarkConfig, layout: StreamLayout, num_classes: int, rng: np.random.Generator):
        sizes = layout.sizes()
        empty = [name for name, n in sizes.items() if n == 0]
        if empty:
            raise ValueError(f"layout {layout.name!r} leaves streams {empty} without keypoints")
        if num_classes < 2:
            raise ValueError("need at least one gloss besides the blank")
        self.config = config
        self.layout = layout
        self.num_classes = num_classes
        self.encoders: dict[str, EncoderParams] = {name: init_encoder(rng, sizes[name], config) for name in STREAM_NAMES}
        self.heads: dict[str, HeadParams] = {}
        self.norms: dict[str, NormState] = {}
        for head in self.head_names:
            self.heads[head], self.norms[head] = init_head(rng, stream_width(head, config.out_channels), num_classes, config)

    @property
    def head_names(self) -> tuple[str, ...]:
        return ("fuse",) if self.config.streams == "fuse" else tuple(DECODING_STREAMS)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config, self.layout, self.num_classes - 1)

    def parameters(self) -> dict[str, nd.DiffArray]:
        """All trainable arrays under stable dotted names, in a fixed order."""
        out = {}
        for name, enc in self.encoders.items():
            out.update(enc.named(f"enc.{name}."))
        for name, head in self.heads.items():
            out.update(head.named(f"dec.{name}."))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self.norms.items():
            out[f"dec.{name}.running_mean"] = state.mean
            out[f"dec.{name}.running_var"] = state.var
        return out

    def load_arrays(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(params):
            missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
            raise ValueError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, arr in own.items():
            if arr.shape != params[name].shape:
                raise ValueError(f"{name}: shape {params[name].shape} does not match {arr.shape}")
            arr.value = np.array(params[name], dtype=np.float64)
        for name, state in self.norms.items():
            state.mean = np.array(buffers[f"dec.{name}.running_mean"], dtype=np.float64)
            state.var = np.array(buffers[f"dec.{name}.running_var"], dtype=np.float64)

    def encode(self, streams: dict[str, np.ndarray]) -> dict[str, nd.DiffArray]:
        """Stream arrays ``T x P_s x 3`` to encoder features ``T' x D``."""
        return {
            name: encoder_forward(np.transpose(streams[name], (2, 0, 1)), self.encoders[name], self.config)
            for name in STREAM_NAMES
        }

    def forward(self, streams: dict[str, np.ndarray], training: bool):
        """Logits per decoding head plus normalisation statistics to apply.

        Running statistics are not touched here; pass the returned stats to
        :meth:`apply_stats` so concurrent passes can commit in a fixed order.
        """
        bundle = fuse_streams(self.encode(streams), self.head_names)
        logits, stats = {}, {}
        for head in self.head_names:
            logits[head], stats[head] = head_forward(bundle[head], self.heads[head], self.norms[head], self.config, training)
        return logits, stats

    def apply_stats(self, stats: dict) -> None:
        for head, s in stats.items():
            if s is not None:
                update_running(self.norms[head], s, self.config.bn_momentum)
