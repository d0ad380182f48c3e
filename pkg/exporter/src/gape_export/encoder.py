"""Frozen transformer encoders and CLS pooling."""

from __future__ import annotations

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from .errors import EncodingError


def load_encoder(model_id: str):
    """Load a tokenizer + frozen encoder from a hub name or local directory."""
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModel.from_pretrained(model_id)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return tokenizer, model


def hidden_size(model) -> int:
    return int(model.config.hidden_size)


def embed_cls(tokenizer, model, texts: list[str], max_length: int,
              batch_size: int) -> np.ndarray:
    """Embed texts as the last hidden state of the leading token, batched.

    The encoder stays frozen; output is float32 (n, hidden). Any non-finite
    value aborts the run.
    """
    chunks = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            batch = texts[start:start + batch_size]
            enc = tokenizer(batch, padding=True, truncation=True,
                            max_length=max_length, return_tensors="pt")
            out = model(**enc)
            cls = out.last_hidden_state[:, 0, :]
            if not torch.isfinite(cls).all():
                bad = int(torch.isfinite(cls).all(dim=1).logical_not()
                          .nonzero()[0, 0]) + start
                raise EncodingError(
                    f"encoder produced non-finite values for input {bad}")
            chunks.append(cls.to(torch.float32).cpu().numpy())
    return np.concatenate(chunks, axis=0)
