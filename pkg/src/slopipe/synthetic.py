"""Synthetic component profiles bundled for experiments.

These are hand-shaped curves, not measurements. The four-stage retrieval
pipeline mimics a vision encoder that dominates GPU time (B) next to small
text encoder (A), cross-attention (C) and late-interaction search (D)
stages that barely benefit from a bigger GPU slice.
"""
from __future__ import annotations

from .executor import ComponentProfile, profile_from_curve

BATCHES = (1, 2, 4, 8, 16, 32)


def _curve(base, per, knee, mem, frac):
    return {"base_ms": base, "per_item_ms": per, "knee": knee, "memory_gb": mem, "compute_fraction": frac}


def retrieval_profiles() -> dict[str, ComponentProfile]:
    return {
        "text-enc": profile_from_curve("text-enc", {
            6: _curve(4.0, 3.75, 16, 2, 0.9),
            12: _curve(4.0, 3.60, 16, 2, 0.5),
            24: _curve(4.0, 3.55, 16, 2, 0.25),
        }, BATCHES),
        "vision-enc": profile_from_curve("vision-enc", {
            # 14 GB resident: only a full GPU fits it
            12: _curve(20.0, 47.0, 16, 14, 1.0),
            24: _curve(20.0, 23.75, 16, 14, 0.95),
        }, BATCHES),
        "cross-attn": profile_from_curve("cross-attn", {
            6: _curve(4.0, 3.75, 16, 3, 0.9),
            12: _curve(4.0, 3.60, 16, 3, 0.5),
            24: _curve(4.0, 3.55, 16, 3, 0.25),
        }, BATCHES),
        "search": profile_from_curve("search", {
            6: _curve(30.0, 20.3, 16, 4, 0.8),
            12: _curve(30.0, 19.5, 16, 4, 0.45),
            24: _curve(30.0, 19.0, 16, 4, 0.25),
        }, BATCHES),
    }


RETRIEVAL_STAGES = {"A": "text-enc", "B": "vision-enc", "C": "cross-attn", "D": "search"}


def retrieval_pipeline_doc(max_batch: int = 16) -> dict:
    return {
        "name": "preflmr",
        "ingress": "ingress",
        "egress": "D",
        "stages": [
            {"id": "A", "model": "text-enc", "max_batch": max_batch, "incast": ["ingress"]},
            {"id": "B", "model": "vision-enc", "max_batch": max_batch, "incast": ["ingress"]},
            {"id": "C", "model": "cross-attn", "max_batch": max_batch, "incast": ["A", "B"]},
            {"id": "D", "model": "search", "max_batch": max_batch, "incast": ["C"]},
        ],
        "edges": [["ingress", "A"], ["ingress", "B"], ["A", "C"], ["B", "C"], ["C", "D"]],
    }


def encoder_profile() -> dict[str, ComponentProfile]:
    """Single-model profile used by the resize scenario."""
    return {
        "encoder": profile_from_curve("encoder", {
            24: _curve(12.0, 23.25, 16, 10, 1.0),
        }, BATCHES),
    }


def sublinear_profile() -> dict[str, ComponentProfile]:
    """Throughput rises with batch size until 16, then stays flat."""
    return {
        "encoder": profile_from_curve("encoder", {
            24: _curve(40.0, 5.0, 16, 10, 1.0),
        }, (1, 2, 4, 8, 16, 32)),
    }
