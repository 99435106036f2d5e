"""Deterministic synthetic episode generator.

Stands in for the language model: emits per-round KV caches and attention
records that are self-consistent (attention rows are a softmax over
query/key dot products) and bit-reproducible. Randomness comes from the
Philox 4x64 counter-based generator, keyed by the episode seed, with one
fixed counter block per (stream, round); standard normal draws use numpy's
Generator on top of that bit stream. Any round of any episode can
therefore be regenerated on its own.

Value structures:

  gaussian         iid standard normal value rows
  low_rank         per-head product of (tokens x value_rank) coefficients
                   and a (value_rank x value_dim) basis
  planted_in_span  same low-rank construction; with a retention budget of
                   at least ``value_rank`` generic rows, deleted value rows
                   lie in the span of the retained ones, so backfill must
                   take its skip path
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EmptyInput
from .kv import IndexList, KvCache, as_index_list
from .scoring import AttentionRecord

VALUE_STRUCTURES = ("gaussian", "low_rank", "planted_in_span")

_STREAM_KEYS = 0
_STREAM_VALUES = 1
_STREAM_VALUE_BASIS = 2
_STREAM_QUERIES = 3


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape, seed and structure of one synthetic multi-round episode."""

    seed: int = 0
    num_layers: int = 2
    num_kv_heads: int = 2
    kv_group_size: int = 2
    key_dim: int = 16
    value_dim: int = 16
    prompt_lens: tuple[int, ...] = (180, 160, 184)
    gen_len: int = 40
    value_structure: str = "gaussian"
    value_rank: int = 4

    def __post_init__(self):
        object.__setattr__(self, "prompt_lens", tuple(int(n) for n in self.prompt_lens))
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit word")
        for name in ("num_layers", "num_kv_heads", "kv_group_size", "key_dim", "value_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.prompt_lens or any(n < 1 for n in self.prompt_lens):
            raise ValueError("prompt_lens must be a non-empty list of positive lengths")
        if self.gen_len < 1:
            raise ValueError("gen_len must be positive")
        if self.value_structure not in VALUE_STRUCTURES:
            raise ValueError(
                f"unknown value_structure {self.value_structure!r}, "
                f"expected one of {VALUE_STRUCTURES}"
            )
        if self.value_rank < 1:
            raise ValueError("value_rank must be positive")

    @property
    def num_rounds(self) -> int:
        return len(self.prompt_lens)

    @property
    def num_query_heads(self) -> int:
        return self.num_kv_heads * self.kv_group_size


@dataclass(frozen=True)
class EpisodeRound:
    """One agent round as the backbone hands it to the relay."""

    cache: KvCache
    prompt: IndexList
    generation: IndexList
    attention: AttentionRecord
    padding: IndexList = ()


def _rng(seed: int, round_i: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[stream, round_i, 0, 0]))


def tiny_attention_forward(keys, queries, scale: float) -> np.ndarray:
    """Row-stochastic attention: softmax(scale * q . K^T) per query row."""
    keys = np.asarray(keys, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if keys.ndim != 2 or queries.ndim != 2:
        raise DimensionMismatch("keys and queries must be 2-D")
    if keys.shape[1] != queries.shape[1]:
        raise DimensionMismatch(
            f"key dim {keys.shape[1]} does not match query dim {queries.shape[1]}"
        )
    if keys.shape[0] == 0:
        raise EmptyInput("softmax over zero keys is undefined")
    logits = float(scale) * (queries @ keys.T)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def generate_episode(spec: EpisodeSpec, round_i: int) -> EpisodeRound:
    """Deterministically build round ``round_i`` (1-based) of an episode.

    Global positions are assigned contiguously: each round's prompt block
    follows the previous round's generation block.
    """
    if not 1 <= round_i <= spec.num_rounds:
        raise ValueError(f"round {round_i} outside 1..{spec.num_rounds}")
    prompt_len = spec.prompt_lens[round_i - 1]
    base = sum(spec.prompt_lens[: round_i - 1]) + (round_i - 1) * spec.gen_len
    prompt = tuple(range(base, base + prompt_len))
    generation = tuple(range(base + prompt_len, base + prompt_len + spec.gen_len))
    tokens = prompt_len + spec.gen_len
    layers, heads = spec.num_layers, spec.num_kv_heads

    keys = _rng(spec.seed, round_i, _STREAM_KEYS).standard_normal(
        (layers, heads, tokens, spec.key_dim)
    )
    if spec.value_structure == "gaussian":
        values = _rng(spec.seed, round_i, _STREAM_VALUES).standard_normal(
            (layers, heads, tokens, spec.value_dim)
        )
    else:
        rank = min(spec.value_rank, spec.value_dim, tokens)
        coeff = _rng(spec.seed, round_i, _STREAM_VALUES).standard_normal(
            (layers, heads, tokens, rank)
        )
        basis = _rng(spec.seed, round_i, _STREAM_VALUE_BASIS).standard_normal(
            (layers, heads, rank, spec.value_dim)
        )
        values = np.einsum("lhtr,lhrd->lhtd", coeff, basis)

    queries = _rng(spec.seed, round_i, _STREAM_QUERIES).standard_normal(
        (layers, spec.num_query_heads, spec.gen_len, spec.key_dim)
    )
    scale = 1.0 / math.sqrt(spec.key_dim)
    weights = np.empty((layers, spec.num_query_heads, spec.gen_len, prompt_len))
    for layer in range(layers):
        for q_head in range(spec.num_query_heads):
            kv_head = q_head // spec.kv_group_size
            weights[layer, q_head] = tiny_attention_forward(
                keys[layer, kv_head, :prompt_len, :], queries[layer, q_head], scale
            )
    attention = AttentionRecord(
        weights=weights,
        gen_positions=generation,
        columns=prompt,
        kv_group_size=spec.kv_group_size,
    )
    cache = KvCache(keys=keys, values=values, positions=as_index_list(prompt + generation))
    return EpisodeRound(cache=cache, prompt=prompt, generation=generation, attention=attention)


def episode_source(spec: EpisodeSpec) -> Callable[[int], EpisodeRound]:
    """A round-indexed callable suitable for the relay driver."""

    def source(round_i: int) -> EpisodeRound:
        return generate_episode(spec, round_i)

    return source
