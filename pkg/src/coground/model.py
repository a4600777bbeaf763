"""The three-encoder architecture: visual encoder, text encoder, and the
multimodal fusion encoder whose cross-attention doubles as the
mention-to-region grounding function.

Transformer blocks are post-norm: self-attention and a two-layer ReLU FFN,
each wrapped in residual + layer norm. Regions carry no position encoding,
so the visual path is permutation equivariant; tokens get fixed sinusoidal
positions. The cross-attention weights, averaged over heads, are published
per fusion layer as the grounding matrix.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import SOFT, GroundingMatrix
from .autodiff import Tensor
from .data import MentionSpan, RegionSet
from .errors import CapacityError, ContractError, DataError, VocabularyError

FUSE_OVER_MENTIONS = "mentions"
FUSE_OVER_TOKENS = "tokens"


@dataclass(frozen=True)
class ModelConfig:
    d_region: int
    d_embed: int
    vocab_size: int
    n_text_layers: int = 4
    n_fusion_layers: int = 4
    n_visual_layers: int = 2
    n_heads: int = 2
    ffn_hidden: int = 0  # 0 means 2 * d_embed
    max_regions: int = 32
    max_tokens: int = 128
    seed: int = 0
    attn_scale_dim: int = 0  # 0 means the per-head dimension
    fusion_self_attention: str = FUSE_OVER_MENTIONS
    layer_norm_eps: float = 1e-5
    # sinusoid amplitude relative to the 0.02-scale token embeddings; at 1.0
    # position drowns token identity and grounding learns a spatial shortcut
    pe_scale: float = 0.05
    # learned relative-position bias (per head, clipped window) on text and
    # fusion self-attention; pronouns cannot find their antecedents from
    # tiny absolute encodings alone, this gives "previous mention" a handle.
    # 0 disables.
    rel_pos_window: int = 8

    def __post_init__(self):
        counts = {
            "d_region": self.d_region,
            "d_embed": self.d_embed,
            "vocab_size": self.vocab_size,
            "n_text_layers": self.n_text_layers,
            "n_fusion_layers": self.n_fusion_layers,
            "n_visual_layers": self.n_visual_layers,
            "n_heads": self.n_heads,
            "max_regions": self.max_regions,
            "max_tokens": self.max_tokens,
        }
        for name, value in counts.items():
            if value < 1:
                raise ContractError(f"model config: {name} must be >= 1, got {value}")
        if self.d_embed % self.n_heads != 0:
            raise ContractError(
                f"model config: d_embed {self.d_embed} not divisible by n_heads {self.n_heads}"
            )
        if self.fusion_self_attention not in (FUSE_OVER_MENTIONS, FUSE_OVER_TOKENS):
            raise ContractError(
                f"model config: fusion_self_attention must be "
                f"'{FUSE_OVER_MENTIONS}' or '{FUSE_OVER_TOKENS}'"
            )

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 2 * self.d_embed

    @property
    def head_dim(self) -> int:
        return self.d_embed // self.n_heads

    @property
    def attn_scale(self) -> float:
        dim = self.attn_scale_dim if self.attn_scale_dim > 0 else self.head_dim
        return 1.0 / np.sqrt(dim)


@dataclass
class Encodings:
    """Everything a forward pass produces for one sample."""

    region_emb: Tensor  # |I| x D, pre-fusion
    token_emb: Tensor  # T x D
    mention_emb: Tensor  # |N| x D, pre-fusion pooled spans
    fused_mention_emb: Tensor  # |N| x D
    grounding: list[GroundingMatrix]  # one soft matrix per fusion layer

    @property
    def last_grounding(self) -> GroundingMatrix:
        return self.grounding[-1]


def sinusoid_table(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pool_mentions(token_emb: Tensor, mentions: list[MentionSpan]) -> Tensor:
    """Mean of each mention's token rows; an empty list yields a 0 x D matrix."""
    for span in mentions:
        if span.end > token_emb.shape[0]:
            raise ContractError(
                f"mention span [{span.start}, {span.end}) outside {token_emb.shape[0]} tokens"
            )
    return ad.pool_rows(token_emb, [span.indices for span in mentions])


class CorefGroundingModel:
    """Parameter container plus forward passes for all three encoders."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._pe = Tensor(sinusoid_table(cfg.max_tokens, cfg.d_embed) * cfg.pe_scale)
        rng = np.random.default_rng(cfg.seed)
        d, hidden = cfg.d_embed, cfg.hidden

        self._weight(rng, "token_embedding", (cfg.vocab_size, d))
        self._weight(rng, "region_proj.w", (cfg.d_region, d))
        self._bias("region_proj.b", d)
        for i in range(cfg.n_visual_layers):
            self._encoder_layer(rng, f"visual.{i}", d, hidden)  # no order on regions
        for i in range(cfg.n_text_layers):
            self._encoder_layer(rng, f"text.{i}", d, hidden, relative=True)
        for i in range(cfg.n_fusion_layers):
            self._encoder_layer(rng, f"fusion.{i}.self", d, hidden, relative=True)
            self._attn_block(rng, f"fusion.{i}.cross", d)
            self._norm(f"fusion.{i}.cross_norm", d)
        self._weight(rng, "mlm_head.w", (d, cfg.vocab_size))
        self._bias("mlm_head.b", cfg.vocab_size)
        self._weight(rng, "box_head.w", (d, 4))
        self._bias("box_head.b", 4)

    # -- parameter bookkeeping -------------------------------------------

    def _weight(self, rng, name: str, shape) -> None:
        self.params[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def _bias(self, name: str, dim: int) -> None:
        self.params[name] = Tensor(np.zeros(dim), requires_grad=True)

    def _norm(self, name: str, dim: int) -> None:
        self.params[name + ".gain"] = Tensor(np.ones(dim), requires_grad=True)
        self.params[name + ".bias"] = Tensor(np.zeros(dim), requires_grad=True)

    def _attn_block(self, rng, name: str, d: int, relative: bool = False) -> None:
        for proj in ("wq", "wk", "wv", "wo"):
            self._weight(rng, f"{name}.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            self._bias(f"{name}.{bias}", d)
        if relative and self.cfg.rel_pos_window > 0:
            span = 2 * self.cfg.rel_pos_window + 1
            self.params[f"{name}.rel_bias"] = Tensor(
                np.zeros((self.cfg.n_heads, span)), requires_grad=True
            )

    def _encoder_layer(self, rng, name: str, d: int, hidden: int, relative: bool = False) -> None:
        self._attn_block(rng, f"{name}.attn", d, relative=relative)
        self._norm(f"{name}.norm1", d)
        self._weight(rng, f"{name}.ffn.w1", (d, hidden))
        self._bias(f"{name}.ffn.b1", hidden)
        self._weight(rng, f"{name}.ffn.w2", (hidden, d))
        self._bias(f"{name}.ffn.b2", d)
        self._norm(f"{name}.norm2", d)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- building blocks ---------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.matmul(x, self.params[name + ".w"]), self.params[name + ".b"])

    def _layer_norm(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(
            x, self.params[name + ".gain"], self.params[name + ".bias"], eps=self.cfg.layer_norm_eps
        )

    def _attention(self, name: str, queries: Tensor, keys_values: Tensor) -> tuple[Tensor, Tensor]:
        """Multi-head attention; returns the output and the head-mean weights."""
        p = self.params
        q = ad.add(ad.matmul(queries, p[f"{name}.wq"]), p[f"{name}.bq"])
        k = ad.add(ad.matmul(keys_values, p[f"{name}.wk"]), p[f"{name}.bk"])
        v = ad.add(ad.matmul(keys_values, p[f"{name}.wv"]), p[f"{name}.bv"])
        heads = self.cfg.n_heads
        qh, kh, vh = (ad.split_heads(t, heads) for t in (q, k, v))
        logits = ad.scale(ad.bmm(qh, ad.swap_last_axes(kh)), self.cfg.attn_scale)
        rel = p.get(f"{name}.rel_bias")
        if rel is not None and logits.shape[1] > 0:
            window = self.cfg.rel_pos_window
            n_q, n_k = logits.shape[1], logits.shape[2]
            offsets = np.arange(n_k)[None, :] - np.arange(n_q)[:, None]
            idx = np.clip(offsets, -window, window) + window
            logits = ad.add(logits, ad.gather_last(rel, idx))
        weights = ad.softmax(logits, axis=-1)  # (heads, queries, keys)
        out = ad.add(ad.matmul(ad.merge_heads(ad.bmm(weights, vh)), p[f"{name}.wo"]), p[f"{name}.bo"])
        mean_weights = ad.scale(ad.sum_axis(weights, axis=0), 1.0 / heads)
        return out, mean_weights

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        hidden = ad.relu(ad.add(ad.matmul(x, self.params[f"{name}.w1"]), self.params[f"{name}.b1"]))
        return ad.add(ad.matmul(hidden, self.params[f"{name}.w2"]), self.params[f"{name}.b2"])

    def _encoder_block(self, x: Tensor, name: str) -> Tensor:
        attended, _ = self._attention(f"{name}.attn", x, x)
        x = self._layer_norm(ad.add(x, attended), f"{name}.norm1")
        x = self._layer_norm(ad.add(x, self._ffn(x, f"{name}.ffn")), f"{name}.norm2")
        return x

    # -- encoders -----------------------------------------------------------

    def encode_regions(self, regions: RegionSet) -> Tensor:
        if len(regions) == 0:
            raise ContractError("encode_regions: need at least one region")
        if len(regions) > self.cfg.max_regions:
            raise CapacityError(
                f"encode_regions: {len(regions)} regions exceed the budget of {self.cfg.max_regions}"
            )
        if regions.features.shape[1] != self.cfg.d_region:
            raise ContractError(
                f"encode_regions: features have dim {regions.features.shape[1]}, "
                f"model expects {self.cfg.d_region}"
            )
        x = self._linear(Tensor(regions.features), "region_proj")
        for i in range(self.cfg.n_visual_layers):
            x = self._encoder_block(x, f"visual.{i}")
        return x

    def encode_text(self, token_ids) -> Tensor:
        if len(token_ids) == 0:
            raise ContractError("encode_text: need at least one token")
        if len(token_ids) > self.cfg.max_tokens:
            raise CapacityError(
                f"encode_text: {len(token_ids)} tokens exceed the budget of {self.cfg.max_tokens}"
            )
        for tok in token_ids:
            if not 0 <= tok < self.cfg.vocab_size:
                raise VocabularyError(
                    f"encode_text: token id {tok} outside vocabulary of size {self.cfg.vocab_size}"
                )
        x = ad.embedding_lookup(self.params["token_embedding"], list(token_ids))
        x = ad.add(x, Tensor(self._pe.data[: len(token_ids)]))
        for i in range(self.cfg.n_text_layers):
            x = self._encoder_block(x, f"text.{i}")
        return x

    def fuse(
        self,
        mention_emb: Tensor,
        region_emb: Tensor,
        token_emb: Tensor | None = None,
        mentions: list[MentionSpan] | None = None,
    ) -> tuple[Tensor, list[GroundingMatrix]]:
        """Fusion encoder: self-attention, cross-attention to regions, FFN.

        The published grounding matrix per layer is the head-mean of the
        cross-attention weights. In the "tokens" variant the self-attention
        stream runs over the whole narration and mention queries are
        re-pooled from it each layer.
        """
        if mention_emb.shape[1] != region_emb.shape[1]:
            raise ContractError(
                f"fuse: mention dim {mention_emb.shape[1]} != region dim {region_emb.shape[1]}"
            )
        over_tokens = self.cfg.fusion_self_attention == FUSE_OVER_TOKENS
        if over_tokens and (token_emb is None or mentions is None):
            raise ContractError("fuse: token stream required when fusing over tokens")
        m = mention_emb
        t = token_emb
        grounding: list[GroundingMatrix] = []
        for i in range(self.cfg.n_fusion_layers):
            if over_tokens:
                attended, _ = self._attention(f"fusion.{i}.self.attn", t, t)
                t = self._layer_norm(ad.add(t, attended), f"fusion.{i}.self.norm1")
                m = pool_mentions(t, mentions)
            else:
                attended, _ = self._attention(f"fusion.{i}.self.attn", m, m)
                m = self._layer_norm(ad.add(m, attended), f"fusion.{i}.self.norm1")
            cross, weights = self._attention(f"fusion.{i}.cross", m, region_emb)
            m = self._layer_norm(ad.add(m, cross), f"fusion.{i}.cross_norm")
            m = self._layer_norm(
                ad.add(m, self._ffn(m, f"fusion.{i}.self.ffn")), f"fusion.{i}.self.norm2"
            )
            grounding.append(GroundingMatrix(weights.data.copy(), SOFT, tensor=weights))
        return m, grounding

    def forward(self, sample) -> Encodings:
        region_emb = self.encode_regions(sample.regions)
        token_emb = self.encode_text(sample.narration.token_ids)
        mention_emb = pool_mentions(token_emb, sample.narration.mentions)
        fused, grounding = self.fuse(
            mention_emb, region_emb, token_emb=token_emb, mentions=sample.narration.mentions
        )
        return Encodings(
            region_emb=region_emb,
            token_emb=token_emb,
            mention_emb=mention_emb,
            fused_mention_emb=fused,
            grounding=grounding,
        )

    def mlm_logits(self, token_ids) -> Tensor:
        """Vocabulary logits per position, from a (usually masked) token sequence."""
        return self._linear(self.encode_text(token_ids), "mlm_head")

    def box_deltas(self, fused_mention_emb: Tensor) -> Tensor:
        """Predicted (dx, dy, dw, dh) box refinements per mention."""
        return self._linear(fused_mention_emb, "box_head")

    # -- checkpointing --------------------------------------------------------

    FORMAT = "coground-model"
    VERSION = 1

    def save(self, path) -> None:
        """Versioned binary container; f64 round-trips bit for bit."""
        header = {
            "format": self.FORMAT,
            "version": self.VERSION,
            "config": dataclasses.asdict(self.cfg),
            "params": [
                {"name": name, "shape": list(p.data.shape)} for name, p in self.params.items()
            ],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for p in self.params.values():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CorefGroundingModel":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise DataError(f"checkpoint {path}: unreadable header") from exc
            if header.get("format") != cls.FORMAT:
                raise DataError(f"checkpoint {path}: not a model checkpoint")
            if header.get("version") != cls.VERSION:
                raise DataError(
                    f"checkpoint {path}: version {header.get('version')} unsupported"
                )
            model = cls(ModelConfig(**header["config"]))
            if [entry["name"] for entry in header["params"]] != list(model.params):
                raise DataError(f"checkpoint {path}: parameter names do not match the config")
            for spec in header["params"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise DataError(f"checkpoint {path}: truncated at {spec['name']}")
                model.params[spec["name"]] = Tensor(
                    np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True
                )
        return model
