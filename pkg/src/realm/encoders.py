"""Per-modality learnable encoders mapping raw inputs to the shared
hidden dimension d.

- GRUEncoder: standard gated recurrence over the imputed T x F lab matrix,
  zero initial state, one hidden vector per visit.
- TimeEncoder: sin/cos featurization of visit timestamps over geometric
  frequencies followed by a one-hidden-layer MLP.
- NoteEncoder: per-visit note embeddings concatenated with the (broadcast)
  retrieval-text embedding, projected to d.
- RagInjector: the symmetric time-series counterpart, concatenating the
  TS-side retrieval embedding onto the GRU outputs.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class GRUEncoder(nn.Module):
    """Gated recurrent encoder, one cell unrolled over the visit axis.

    Per step with input x_t and previous state h:
        r = sigmoid(x_t W_ir + h W_hr + b_r)
        u = sigmoid(x_t W_iu + h W_hu + b_u)
        c = tanh(x_t W_ic + (r * h) W_hc + b_c)
        h = u * h + (1 - u) * c
    """

    def __init__(self, n_features: int, hidden: int) -> None:
        super().__init__()
        self.n_features = n_features
        self.hidden = hidden
        self.weight_ih = nn.Parameter(torch.empty(n_features, 3 * hidden))
        self.weight_hh = nn.Parameter(torch.empty(hidden, 3 * hidden))
        self.bias = nn.Parameter(torch.zeros(3 * hidden))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.hidden)
        with torch.no_grad():
            self.weight_ih.uniform_(-bound, bound)
            self.weight_hh.uniform_(-bound, bound)
            self.bias.zero_()

    def forward(self, ts: torch.Tensor) -> torch.Tensor:
        """(B, T, F) -> (B, T, d). Inputs must be fully imputed."""
        if not torch.isfinite(ts).all():
            raise ValueError("GRU input contains NaN or Inf; impute upstream")
        b, t, _ = ts.shape
        d = self.hidden
        h = ts.new_zeros(b, d)
        gates_x = ts @ self.weight_ih + self.bias  # (B, T, 3d)
        outs = []
        for i in range(t):
            gx = gates_x[:, i]
            gh = h @ self.weight_hh
            r = torch.sigmoid(gx[:, :d] + gh[:, :d])
            u = torch.sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
            c = torch.tanh(gx[:, 2 * d :] + (r * h) @ self.weight_hh[:, 2 * d :])
            h = u * h + (1.0 - u) * c
            outs.append(h)
        return torch.stack(outs, dim=1)


def sincos_features(times: torch.Tensor, n_freqs: int, omega_max: float) -> torch.Tensor:
    """(..., T) hours -> (..., T, 2K) with [sin(t/w_k), cos(t/w_k)] pairs
    over geometric periods w_k = omega_max ** (k / (K - 1))."""
    if n_freqs < 1:
        raise ValueError(f"n_freqs must be >= 1, got {n_freqs}")
    exponents = (
        torch.arange(n_freqs, dtype=times.dtype, device=times.device) / max(n_freqs - 1, 1)
    )
    omega = torch.pow(torch.as_tensor(omega_max, dtype=times.dtype, device=times.device), exponents)
    phase = times.unsqueeze(-1) / omega  # (..., T, K)
    feats = torch.stack([torch.sin(phase), torch.cos(phase)], dim=-1)  # (..., T, K, 2)
    return feats.flatten(-2)  # (..., T, 2K) ordered sin,cos per frequency


class TimeEncoder(nn.Module):
    """Timestamp embedding: sin/cos features through a one-hidden-layer MLP."""

    def __init__(self, hidden: int, n_freqs: int = 8, omega_max: float = 10000.0) -> None:
        super().__init__()
        self.n_freqs = n_freqs
        self.omega_max = omega_max
        self.fc1 = nn.Linear(2 * n_freqs, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    def forward(self, times: torch.Tensor) -> torch.Tensor:
        """(B, T) hours -> (B, T, d)."""
        feats = sincos_features(times, self.n_freqs, self.omega_max)
        return self.fc2(torch.tanh(self.fc1(feats)))


class NoteEncoder(nn.Module):
    """Project per-visit note embeddings (plus the broadcast retrieval
    embedding when enabled) into the shared dimension."""

    def __init__(self, embed_dim: int, hidden: int, with_rag: bool) -> None:
        super().__init__()
        self.with_rag = with_rag
        in_dim = 2 * embed_dim if with_rag else embed_dim
        self.proj = nn.Linear(in_dim, hidden)

    def forward(self, note_vecs: torch.Tensor, rag_vec: torch.Tensor | None = None) -> torch.Tensor:
        """note_vecs (B, T, D), rag_vec (B, D) -> (B, T, d). Missing notes
        arrive as zero rows (the tensorizer records the mask)."""
        if self.with_rag:
            if rag_vec is None:
                raise ValueError("encoder built with retrieval input but rag_vec is None")
            t = note_vecs.shape[1]
            rag = rag_vec.unsqueeze(1).expand(-1, t, -1)
            x = torch.cat([note_vecs, rag], dim=-1)
        else:
            x = note_vecs
        return torch.tanh(self.proj(x))


class RagInjector(nn.Module):
    """Symmetric retrieval injection for the time-series branch:
    concat(h_ts, rag_vec) -> d."""

    def __init__(self, hidden: int, embed_dim: int) -> None:
        super().__init__()
        self.proj = nn.Linear(hidden + embed_dim, hidden)

    def forward(self, h_ts: torch.Tensor, rag_vec: torch.Tensor) -> torch.Tensor:
        t = h_ts.shape[1]
        rag = rag_vec.unsqueeze(1).expand(-1, t, -1)
        return torch.tanh(self.proj(torch.cat([h_ts, rag], dim=-1)))
