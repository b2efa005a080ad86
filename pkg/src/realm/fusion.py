"""Adaptive multimodal fusion: per-modality self-attention, bidirectional
cross-attention, a learnable convex blend of the two fused sequences, and
attention pooling into a single patient vector for the prediction head.

Every attention layer and feed-forward network is wrapped with a residual
connection and batch normalization computed over non-padded positions
only. Padded visit rows are re-zeroed after every sublayer, so arbitrary
garbage in padded positions can never leak into the prediction -- the
mask-invariance contract is bit-exact.

Ablation variants replace the attention machinery with elementwise
addition or concat-projection of the per-modality sequences; the pooling
head is shared by all variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn


class FusionError(ValueError):
    pass


def _mask_rows(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask.to(x.dtype).unsqueeze(-1)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with explicit per-head projections.

    Shapes: query (B, Tq, d), key/value (B, Tk, d), key_mask (B, Tk) with
    True marking real positions. Returns (output (B, Tq, d), attention
    weights (B, H, Tq, Tk)).
    """

    def __init__(self, hidden: int, heads: int) -> None:
        super().__init__()
        if hidden % heads != 0:
            raise FusionError(f"heads ({heads}) must divide hidden dim ({hidden})")
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, hidden)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor, key_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if not bool(key_mask.any(dim=1).all()):
            raise FusionError("attention requires at least one unmasked key per sequence")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v  # (B, H, Tq, hd)
        b, _, tq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, tq, self.hidden)
        return self.out_proj(out), attn


class MaskedBatchNorm1d(nn.Module):
    """BatchNorm over (batch x time) per channel, restricted to non-padded
    positions. Training uses batch statistics and updates running ones;
    evaluation uses the frozen running statistics, so eval outputs do not
    depend on batch composition."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.training:
            m = mask.to(x.dtype).unsqueeze(-1)
            count = m.sum()
            if count < 1:
                raise FusionError("batch norm needs at least one unmasked position")
            mean = (x * m).sum(dim=(0, 1)) / count
            var = (((x - mean) * m) ** 2).sum(dim=(0, 1)) / count
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        xhat = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight * xhat + self.bias


class FeedForward(nn.Module):
    def __init__(self, hidden: int, mult: int = 4) -> None:
        super().__init__()
        self.fc1 = nn.Linear(hidden, mult * hidden)
        self.fc2 = nn.Linear(mult * hidden, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class AttnBlock(nn.Module):
    """One attention layer with its feed-forward companion, each wrapped in
    residual + masked batch norm. Padded rows are zeroed on exit."""

    def __init__(self, hidden: int, heads: int, ffn_mult: int) -> None:
        super().__init__()
        self.attn = MultiheadAttention(hidden, heads)
        self.norm_attn = MaskedBatchNorm1d(hidden)
        self.ffn = FeedForward(hidden, ffn_mult)
        self.norm_ffn = MaskedBatchNorm1d(hidden)

    def forward(
        self, query: torch.Tensor, kv: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        a, weights = self.attn(query, kv, kv, mask)
        x = _mask_rows(self.norm_attn(query + a, mask), mask)
        x = _mask_rows(self.norm_ffn(x + self.ffn(x), mask), mask)
        return x, weights


class AttnPool(nn.Module):
    """Learned attention pooling: a_t = softmax_t(w . tanh(W h_t)) over
    unmasked positions, output = sum_t a_t h_t."""

    def __init__(self, hidden: int) -> None:
        super().__init__()
        self.W = nn.Parameter(torch.empty(hidden, hidden))
        self.w = nn.Parameter(torch.empty(hidden))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.W.shape[1])
        with torch.no_grad():
            self.W.uniform_(-bound, bound)
            self.w.uniform_(-bound, bound)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not bool(mask.any(dim=1).all()):
            raise FusionError("attention pooling needs at least one unmasked position")
        scores = torch.tanh(h @ self.W.T) @ self.w  # (B, T)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        return (weights.unsqueeze(-1) * h).sum(dim=1), weights


class PredictionHead(nn.Module):
    """Single-layer head: probability = logistic(linear(tanh(z*))),
    clamped away from exact 0/1 for loss stability."""

    def __init__(self, hidden: int) -> None:
        super().__init__()
        self.fc = nn.Linear(hidden, 1)

    def forward(self, z_star: torch.Tensor) -> torch.Tensor:
        p = torch.sigmoid(self.fc(torch.tanh(z_star))).squeeze(-1)
        return torch.clamp(p, 1e-7, 1.0 - 1e-7)


def fuse_variant(
    kind: str,
    z_ts: torch.Tensor,
    z_text: torch.Tensor,
    proj: Optional[nn.Module] = None,
) -> torch.Tensor:
    """Baseline fusion of two representations: elementwise addition or
    concatenation followed by a linear projection back to d."""
    if kind == "add":
        if z_ts.shape != z_text.shape:
            raise FusionError(
                f"add fusion needs equal shapes, got {tuple(z_ts.shape)} vs {tuple(z_text.shape)}"
            )
        return z_ts + z_text
    if kind == "concat":
        cat = torch.cat([z_ts, z_text], dim=-1)
        return proj(cat) if proj is not None else cat
    raise FusionError(f"unknown fusion variant {kind!r}")


@dataclass
class FusedOutput:
    z: torch.Tensor  # (B, T, d) fused sequence
    z_star: torch.Tensor  # (B, d) pooled patient vector
    y_hat: torch.Tensor  # (B,) probabilities
    attn: dict = field(default_factory=dict)


class FusionNet(nn.Module):
    """Fusion of up to two modality sequences plus the time embedding.

    kind "attention" is the full network; "add" and "concat" are the
    ablation baselines (no attention layers, shared pooling head). With a
    single active modality the network reduces to that branch's
    self-attention stack.
    """

    KINDS = ("attention", "add", "concat")

    def __init__(
        self,
        hidden: int,
        heads: int = 4,
        ffn_mult: int = 4,
        modalities: tuple[str, ...] = ("ts", "text"),
        kind: str = "attention",
    ) -> None:
        super().__init__()
        if kind not in self.KINDS:
            raise FusionError(f"unknown fusion kind {kind!r}")
        if not modalities or any(m not in ("ts", "text") for m in modalities):
            raise FusionError(f"modalities must be a subset of ts/text, got {modalities}")
        if len(modalities) == 1 and kind != "attention":
            raise FusionError("add/concat variants need both modalities")
        self.hidden = hidden
        self.kind = kind
        self.modalities = tuple(modalities)
        self.both = len(self.modalities) == 2

        if kind == "attention":
            if "ts" in self.modalities:
                self.self_ts = AttnBlock(hidden, heads, ffn_mult)
            if "text" in self.modalities:
                self.self_text = AttnBlock(hidden, heads, ffn_mult)
            if self.both:
                self.cross_ts = AttnBlock(hidden, heads, ffn_mult)
                self.cross_text = AttnBlock(hidden, heads, ffn_mult)
                self.alpha = nn.Parameter(torch.zeros(()))
        elif kind == "concat":
            self.concat_proj = nn.Linear(2 * hidden, hidden)
        self.pre_pool = nn.Linear(hidden, hidden)
        self.pool = AttnPool(hidden)
        self.head = PredictionHead(hidden)

    def blend_weight(self) -> torch.Tensor:
        """The convex-combination coefficient, squashed into (0, 1)."""
        return torch.sigmoid(self.alpha)

    def forward(
        self,
        h_ts: Optional[torch.Tensor],
        h_text: Optional[torch.Tensor],
        h_time: torch.Tensor,
        mask: torch.Tensor,
    ) -> FusedOutput:
        if mask.dtype != torch.bool:
            mask = mask.bool()
        if not bool(mask.any(dim=1).all()):
            raise FusionError("every sequence must have at least one unmasked visit")
        attn: dict = {}
        h_time = _mask_rows(h_time, mask)

        inputs = {}
        if "ts" in self.modalities:
            if h_ts is None:
                raise FusionError("ts branch enabled but h_ts is None")
            inputs["ts"] = _mask_rows(h_ts, mask) + h_time
        if "text" in self.modalities:
            if h_text is None:
                raise FusionError("text branch enabled but h_text is None")
            inputs["text"] = _mask_rows(h_text, mask) + h_time

        if self.kind == "attention":
            seqs = {}
            if "ts" in inputs:
                seqs["ts"], attn["self_ts"] = self.self_ts(inputs["ts"], inputs["ts"], mask)
            if "text" in inputs:
                seqs["text"], attn["self_text"] = self.self_text(inputs["text"], inputs["text"], mask)
            if self.both:
                z_ts, attn["cross_ts"] = self.cross_ts(seqs["ts"], seqs["text"], mask)
                z_text, attn["cross_text"] = self.cross_text(seqs["text"], seqs["ts"], mask)
                a = self.blend_weight()
                z = a * z_ts + (1.0 - a) * z_text
            else:
                z = next(iter(seqs.values()))
        else:
            z = fuse_variant(self.kind, inputs["ts"], inputs["text"], getattr(self, "concat_proj", None))
            z = _mask_rows(z, mask)

        u = _mask_rows(torch.tanh(self.pre_pool(z)), mask)
        z_star, pool_w = self.pool(u, mask)
        attn["pool"] = pool_w
        y_hat = self.head(z_star)
        return FusedOutput(z=z, z_star=z_star, y_hat=y_hat, attn=attn)
