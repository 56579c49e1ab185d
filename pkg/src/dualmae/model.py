"""Encoder-decoder transformer over masked measurement grids.

Each grid token is a (value, time) pair; both scalars are linearly projected
to the embedding width and combined additively with a fixed sinusoidal
positional row, so the sequence length equals the number of measurements.
Only kept tokens (plus a CLS summary slot) enter the encoder; the decoder
re-expands to the full grid, substituting one shared learnable mask token at
every hidden position, adds positional rows again, and regresses a scalar
per slot. A small MLP head on the CLS output serves classification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .masking import MaskPlan, PaddedBatch, build_padded_batch
from .rng import truncated_normal


@dataclass
class ModelConfig:
    grid_len: int
    d_embed: int = 64
    enc_depth: int = 8
    enc_heads: int = 8
    mlp_ratio: float = 4.0
    dec_embed: int = 64
    dec_depth: int = 4
    dec_heads: int = 4
    head_hidden: int = 32
    head_dropout: float = 0.1

    def __post_init__(self):
        if self.grid_len < 1:
            raise ConfigError("grid_len must be positive")
        if self.d_embed % 2 != 0:
            raise ConfigError("embedding width must be even for sinusoidal encodings")
        if self.dec_embed != self.d_embed:
            raise ConfigError("decoder width must match the encoder (no bridge projection)")
        if self.enc_depth > 0 and self.d_embed % self.enc_heads != 0:
            raise ConfigError(f"d_embed={self.d_embed} not divisible by enc_heads={self.enc_heads}")
        if self.dec_depth > 0 and self.dec_embed % self.dec_heads != 0:
            raise ConfigError(f"dec_embed={self.dec_embed} not divisible by dec_heads={self.dec_heads}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigError("depths cannot be negative")

    def to_dict(self) -> dict:
        return {
            "grid_len": self.grid_len,
            "d_embed": self.d_embed,
            "enc_depth": self.enc_depth,
            "enc_heads": self.enc_heads,
            "mlp_ratio": self.mlp_ratio,
            "dec_embed": self.dec_embed,
            "dec_depth": self.dec_depth,
            "dec_heads": self.dec_heads,
            "head_hidden": self.head_hidden,
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Fixed positional table: P[pos, 2k] = sin(pos / 10000^(2k/dim)), odd cols cos."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal table needs an even width, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    k2 = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, k2 / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for name in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                     "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def _param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


def _init_block(d: int, hidden: int, rng) -> BlockParams:
    def w(shape):
        return _param(truncated_normal(rng, shape))

    def zeros(*shape):
        return _param(np.zeros(shape))

    def ones(*shape):
        return _param(np.ones(shape))

    return BlockParams(
        ln1_g=ones(d), ln1_b=zeros(d),
        wq=w((d, d)), bq=zeros(d),
        wk=w((d, d)), bk=zeros(d),
        wv=w((d, d)), bv=zeros(d),
        wo=w((d, d)), bo=zeros(d),
        ln2_g=ones(d), ln2_b=zeros(d),
        w1=w((d, hidden)), b1=zeros(hidden),
        w2=w((hidden, d)), b2=zeros(d),
    )


@dataclass
class ModelParams:
    config: ModelConfig
    value_w: Tensor
    value_b: Tensor
    time_w: Tensor
    time_b: Tensor
    pos_table: np.ndarray  # frozen, never handed to the optimizer
    enc_blocks: list
    dec_blocks: list
    m_token: Tensor
    pad_token: Tensor
    cls_token: Tensor
    recon_w: Tensor
    recon_b: Tensor
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        d = config.d_embed
        hidden = int(round(config.mlp_ratio * d))
        enc = [_init_block(d, hidden, rng) for _ in range(config.enc_depth)]
        dec = [_init_block(d, hidden, rng) for _ in range(config.dec_depth)]
        return cls(
            config=config,
            value_w=_param(truncated_normal(rng, (1, d))),
            value_b=_param(np.zeros(d)),
            time_w=_param(truncated_normal(rng, (1, d))),
            time_b=_param(np.zeros(d)),
            pos_table=sinusoidal_table(config.grid_len, d),
            enc_blocks=enc,
            dec_blocks=dec,
            m_token=_param(truncated_normal(rng, (d,))),
            pad_token=_param(truncated_normal(rng, (d,))),
            cls_token=_param(truncated_normal(rng, (d,))),
            recon_w=_param(truncated_normal(rng, (d, 1))),
            recon_b=_param(np.zeros(1)),
            head_w1=_param(truncated_normal(rng, (d, config.head_hidden))),
            head_b1=_param(np.zeros(config.head_hidden)),
            head_w2=_param(truncated_normal(rng, (config.head_hidden, 1))),
            head_b2=_param(np.zeros(1)),
        )

    def named_parameters(self):
        """Deterministic (name, tensor) iteration over every learnable array."""
        yield "embed.value_w", self.value_w
        yield "embed.value_b", self.value_b
        yield "embed.time_w", self.time_w
        yield "embed.time_b", self.time_b
        for i, block in enumerate(self.enc_blocks):
            yield from block.named(f"enc.{i}")
        for i, block in enumerate(self.dec_blocks):
            yield from block.named(f"dec.{i}")
        yield "token.mask", self.m_token
        yield "token.pad", self.pad_token
        yield "token.cls", self.cls_token
        yield "recon.w", self.recon_w
        yield "recon.b", self.recon_b
        yield "head.w1", self.head_w1
        yield "head.b1", self.head_b1
        yield "head.w2", self.head_w2
        yield "head.b2", self.head_b2

    def encoder_parameter_names(self) -> list:
        """Pretrained side used by fine-tuning (decoder and both heads excluded)."""
        names = ["embed.value_w", "embed.value_b", "embed.time_w", "embed.time_b"]
        for i in range(len(self.enc_blocks)):
            names.extend(name for name, _ in self.enc_blocks[i].named(f"enc.{i}"))
        names.extend(["token.mask", "token.pad", "token.cls"])
        return names

    def head_parameter_names(self) -> list:
        return ["head.w1", "head.b1", "head.w2", "head.b2"]

    def state_arrays(self) -> dict:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state["pos_table"] = self.pos_table.copy()
        return state

    def load_state(self, state: dict):
        for name, t in self.named_parameters():
            incoming = state[name]
            if incoming.shape != t.data.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}: {incoming.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(incoming, dtype=np.float64)
        self.pos_table = np.ascontiguousarray(state["pos_table"], dtype=np.float64)

    def zero_grads(self):
        for _, t in self.named_parameters():
            t.grad = None


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def embed_grid(params: ModelParams, values, times) -> Tensor:
    """Embed every grid slot: value and time projections plus positional row.

    Missing slots carry placeholder zeros; their embeddings are computed but
    dropped before the encoder, so nothing downstream depends on them.
    """
    values = values if isinstance(values, Tensor) else Tensor(values)
    times = times if isinstance(times, Tensor) else Tensor(times)
    v = ad.reshape(values, values.shape + (1,))
    t = ad.reshape(times, times.shape + (1,))
    z = ad.linear(v, params.value_w, params.value_b)
    z = ad.add(z, ad.linear(t, params.time_w, params.time_b))
    return ad.add(z, params.pos_table)


def assemble_encoder_tokens(params: ModelParams, z_grid: Tensor, batch: PaddedBatch) -> Tensor:
    """Lay out [CLS, kept tokens..., pad tokens...] per sample."""
    gathered = ad.gather_slots(z_grid, batch.kept_idx)
    pad_rows = (batch.kept_idx < 0).astype(np.float64)[:, :, None]
    gathered = ad.add(gathered, ad.mul(params.pad_token, pad_rows))
    n = batch.kept_idx.shape[0]
    cls = ad.mul(params.cls_token, np.ones((n, 1, 1)))
    return ad.concat([cls, gathered], axis=1)


def _attention(block: BlockParams, x: Tensor, heads: int, gamma: Optional[np.ndarray]) -> Tensor:
    b, s, d = x.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split(ad.linear(x, block.wq, block.bq))
    k = split(ad.linear(x, block.wk, block.bk))
    v = split(ad.linear(x, block.wv, block.bv))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
    weights = ad.softmax_masked(scores, gamma)
    mixed = ad.matmul(weights, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, s, d))
    return ad.linear(mixed, block.wo, block.bo)


def _mlp(block: BlockParams, x: Tensor) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, block.w1, block.b1)), block.w2, block.b2)


def run_blocks(blocks: Sequence[BlockParams], x: Tensor, heads: int,
               gamma: Optional[np.ndarray] = None) -> Tensor:
    """Pre-norm transformer stack; depth 0 is the identity."""
    for block in blocks:
        x = ad.add(x, _attention(block, ad.layer_norm(x, block.ln1_g, block.ln1_b), heads, gamma))
        x = ad.add(x, _mlp(block, ad.layer_norm(x, block.ln2_g, block.ln2_b)))
    return x


def encode_tokens(params: ModelParams, tokens: Tensor, gamma: np.ndarray) -> Tensor:
    return run_blocks(params.enc_blocks, tokens, params.config.enc_heads, gamma)


def encode_batch(params: ModelParams, values, times, plans: Sequence[MaskPlan]) -> tuple:
    """Embed, pad, and encode a batch of samples; returns (H, batch)."""
    batch = build_padded_batch(plans)
    z_grid = embed_grid(params, values, times)
    tokens = assemble_encoder_tokens(params, z_grid, batch)
    batch.tokens = tokens
    h = encode_tokens(params, tokens, batch.gamma)
    return h, batch


def decode_batch(params: ModelParams, h: Tensor, batch: PaddedBatch) -> Tensor:
    """Re-expand encoder outputs to the full grid and regress one value per slot.

    The encoded CLS row rides along as decoder slot 0 (a global summary the
    grid slots can attend to; it is never reconstructed itself). Training
    therefore shapes the CLS state into a sample-level summary, which is what
    probing and fine-tuning read out.
    """
    cfg = params.config
    length = cfg.grid_len
    kept_part = h[:, 1:, :]  # slot k aligns with kept_idx[:, k]
    z = ad.scatter_slots(kept_part, batch.kept_idx, length)
    hidden = np.zeros((len(batch.plans), length, 1))
    for b, plan in enumerate(batch.plans):
        hidden[b, plan.augmented, 0] = 1.0
        hidden[b, plan.missing, 0] = 1.0
    z = ad.add(z, ad.mul(params.m_token, hidden))
    z = ad.add(z, params.pos_table)
    z = ad.concat([h[:, 0:1, :], z], axis=1)
    z = run_blocks(params.dec_blocks, z, cfg.dec_heads, None)
    out = ad.linear(z[:, 1:, :], params.recon_w, params.recon_b)
    return ad.reshape(out, (len(batch.plans), length))


def reconstruct_batch(params: ModelParams, values, times, plans: Sequence[MaskPlan]) -> tuple:
    """Full pretraining-style forward: returns (x_hat, batch)."""
    h, batch = encode_batch(params, values, times, plans)
    return decode_batch(params, h, batch), batch


def cls_states(params: ModelParams, values, times, plans: Sequence[MaskPlan]) -> Tensor:
    h, _ = encode_batch(params, values, times, plans)
    return h[:, 0, :]


def classify_logits(params: ModelParams, values, times, plans: Sequence[MaskPlan],
                    train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """CLS state through the two-layer head; sigmoid is applied at metric time."""
    cls = cls_states(params, values, times, plans)
    hid = ad.gelu(ad.linear(cls, params.head_w1, params.head_b1))
    hid = ad.dropout(hid, params.config.head_dropout, rng=rng, train=train)
    logits = ad.linear(hid, params.head_w2, params.head_b2)
    return ad.reshape(logits, (cls.shape[0],))


def cls_embeddings(params: ModelParams, values, times, plans: Sequence[MaskPlan]) -> np.ndarray:
    """Frozen CLS representations for probing; no tape is recorded."""
    return cls_states(params, values, times, plans).data.copy()
