"""The end-to-end prediction model: modality encoders feeding the fusion
network, with deterministic parameter initialization and a tensor batch
container shared by training and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

from .encoders import GRUEncoder, NoteEncoder, RagInjector, TimeEncoder
from .fusion import AttnPool, FusedOutput, FusionNet, MaskedBatchNorm1d


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture knobs. ``modalities``/``rag_*``/``fusion`` select the
    ablation variant; everything else is capacity."""

    n_features: int
    embed_dim: int
    hidden: int = 312
    heads: int = 4
    time_freqs: int = 8
    omega_max: float = 10000.0
    ffn_mult: int = 4
    modalities: tuple[str, ...] = ("ts", "text")
    rag_ts: bool = True
    rag_text: bool = True
    rag_injection: str = "symmetric"  # or "text_only"
    fusion: str = "attention"  # or "add" / "concat"

    def __post_init__(self) -> None:
        self.modalities = tuple(self.modalities)
        if self.hidden % self.heads != 0:
            raise ModelError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if self.rag_injection not in ("symmetric", "text_only"):
            raise ModelError(f"unknown rag_injection {self.rag_injection!r}")
        if not self.modalities or any(m not in ("ts", "text") for m in self.modalities):
            raise ModelError(f"modalities must be a subset of ts/text, got {self.modalities}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(d.get("modalities", ("ts", "text")))
        return cls(**d)


@dataclass
class Batch:
    """Model-ready tensors for a set of patients, padded to a common visit
    count. ``visit_mask`` marks real visits; ``note_mask`` marks visits
    that actually had a note (missing notes are zero rows)."""

    ts: torch.Tensor  # (N, T, F) imputed + standardized
    times: torch.Tensor  # (N, T) hours
    note_vecs: torch.Tensor  # (N, T, D)
    rag_ts: torch.Tensor  # (N, D)
    rag_text: torch.Tensor  # (N, D)
    visit_mask: torch.Tensor  # (N, T) bool
    note_mask: torch.Tensor  # (N, T) bool
    y: torch.Tensor  # (N,) float labels
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ts.shape[0]

    def select(self, idx) -> "Batch":
        if self.ids:
            if isinstance(idx, slice):
                ids = self.ids[idx]
            else:
                ids = [self.ids[int(i)] for i in idx]
        else:
            ids = []
        return Batch(
            ts=self.ts[idx],
            times=self.times[idx],
            note_vecs=self.note_vecs[idx],
            rag_ts=self.rag_ts[idx],
            rag_text=self.rag_text[idx],
            visit_mask=self.visit_mask[idx],
            note_mask=self.note_mask[idx],
            y=self.y[idx],
            ids=ids,
        )

    def to(self, dtype: torch.dtype) -> "Batch":
        f = lambda t: t.to(dtype)
        return Batch(
            ts=f(self.ts),
            times=f(self.times),
            note_vecs=f(self.note_vecs),
            rag_ts=f(self.rag_ts),
            rag_text=f(self.rag_text),
            visit_mask=self.visit_mask,
            note_mask=self.note_mask,
            y=f(self.y),
            ids=self.ids,
        )


class RealmModel(nn.Module):
    """Encoders plus fusion network for one task head."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        if "ts" in cfg.modalities:
            self.gru = GRUEncoder(cfg.n_features, cfg.hidden)
            if cfg.rag_ts and cfg.rag_injection == "symmetric":
                self.ts_rag = RagInjector(cfg.hidden, cfg.embed_dim)
        if "text" in cfg.modalities:
            self.note_enc = NoteEncoder(cfg.embed_dim, cfg.hidden, with_rag=cfg.rag_text)
        self.time_enc = TimeEncoder(cfg.hidden, cfg.time_freqs, cfg.omega_max)
        self.fusion = FusionNet(
            cfg.hidden,
            heads=cfg.heads,
            ffn_mult=cfg.ffn_mult,
            modalities=cfg.modalities,
            kind=cfg.fusion,
        )

    def forward(self, batch: Batch) -> FusedOutput:
        h_ts = None
        h_text = None
        if "ts" in self.cfg.modalities:
            h_ts = self.gru(batch.ts)
            if hasattr(self, "ts_rag"):
                h_ts = self.ts_rag(h_ts, batch.rag_ts)
        if "text" in self.cfg.modalities:
            rag = batch.rag_text if self.cfg.rag_text else None
            h_text = self.note_enc(batch.note_vecs, rag)
        h_time = self.time_enc(batch.times)
        return self.fusion(h_ts, h_text, h_time, batch.visit_mask)

    def predict_proba(self, batch: Batch, chunk: int = 1024) -> torch.Tensor:
        """Eval-mode probabilities, chunked to bound memory."""
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(batch), chunk):
                outs.append(self(batch.select(slice(start, start + chunk))).y_hat)
        return torch.cat(outs)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Deterministically (re-)initialize every parameter from one seeded
    generator, walking modules in registration order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, GRUEncoder):
                bound = 1.0 / math.sqrt(module.hidden)
                module.weight_ih.uniform_(-bound, bound, generator=gen)
                module.weight_hh.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
            elif isinstance(module, AttnPool):
                bound = 1.0 / math.sqrt(module.W.shape[1])
                module.W.uniform_(-bound, bound, generator=gen)
                module.w.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, MaskedBatchNorm1d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.running_mean.zero_()
                module.running_var.fill_(1.0)
            elif isinstance(module, FusionNet) and hasattr(module, "alpha"):
                module.alpha.zero_()
    return model


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> RealmModel:
    model = RealmModel(cfg)
    init_parameters(model, seed)
    return model.to(dtype)
