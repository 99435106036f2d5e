"""Attention-mass accounting over generation steps.

The mass of a context position is the sum, over the generation rows of a
round, of the post-softmax attention it received. Masses are computed per
(layer, kv head) first; query heads that share a kv head under grouped
query attention are folded into it (query head h belongs to kv head
h // kv_group_size). Layer and global aggregates are plain sums, arranged
so that the global table is exactly the layer table summed again.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import MissingColumn, WrongGranularity
from .kv import IndexList, as_index_list

GLOBAL = "global"
LAYERWISE = "layerwise"
HEADWISE = "headwise"
GRANULARITIES = (GLOBAL, LAYERWISE, HEADWISE)

_UNIT_ARITY = {GLOBAL: 0, LAYERWISE: 1, HEADWISE: 2}


@dataclass(frozen=True)
class AttentionRecord:
    """Post-softmax attention from generation steps onto context positions.

    Args:
        weights: (num_layers, num_query_heads, gen_steps, num_columns),
            each row non-negative and summing to 1 within 1e-6.
        gen_positions: global position of each generation row (distinct,
            in storage order).
        columns: global position of each attended column, strictly
            increasing.
        kv_group_size: query heads per kv head.
    """

    weights: np.ndarray
    gen_positions: tuple[int, ...]
    columns: IndexList
    kv_group_size: int

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 4:
            raise ValueError("weights must be (layers, query_heads, gen_steps, columns)")
        gen_positions = tuple(int(p) for p in self.gen_positions)
        if len(set(gen_positions)) != len(gen_positions):
            raise ValueError("generation positions must be distinct")
        columns = as_index_list(self.columns)
        layers, q_heads, gen_steps, n_cols = weights.shape
        if layers < 1 or q_heads < 1:
            raise ValueError("need at least one layer and one query head")
        if len(gen_positions) != gen_steps:
            raise ValueError(f"{len(gen_positions)} row labels for {gen_steps} rows")
        if len(columns) != n_cols:
            raise ValueError(f"{len(columns)} column labels for {n_cols} columns")
        if self.kv_group_size < 1 or q_heads % self.kv_group_size != 0:
            raise ValueError("kv_group_size must evenly divide the query head count")
        if weights.size:
            if float(weights.min()) < -1e-12:
                raise ValueError("attention weights must be non-negative")
            if n_cols:
                err = float(np.abs(weights.sum(axis=3) - 1.0).max())
                if err > 1e-6:
                    raise ValueError(f"attention rows must sum to 1 (off by {err:g})")
        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "gen_positions", gen_positions)
        object.__setattr__(self, "columns", columns)

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def num_query_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def num_kv_heads(self) -> int:
        return self.num_query_heads // self.kv_group_size


@dataclass(frozen=True)
class MassTable:
    """Attention mass per unit and position at one granularity.

    Units are keyed by tuples: () for global, (layer,) for layerwise and
    (layer, kv_head) for headwise. Every unit covers the same position set.
    Treat instances as immutable.
    """

    granularity: str
    masses: Mapping[tuple[int, ...], Mapping[int, float]]

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise WrongGranularity(f"unknown granularity {self.granularity!r}")
        arity = _UNIT_ARITY[self.granularity]
        if not self.masses:
            raise ValueError("a mass table needs at least one unit")
        position_sets = set()
        for unit, per_pos in self.masses.items():
            if len(unit) != arity:
                raise WrongGranularity(
                    f"unit {unit!r} does not match granularity {self.granularity!r}"
                )
            position_sets.add(frozenset(per_pos))
        if len(position_sets) != 1:
            raise ValueError("all units must cover the same position set")

    def units(self) -> list[tuple[int, ...]]:
        return sorted(self.masses)

    def positions(self) -> IndexList:
        any_unit = next(iter(self.masses.values()))
        return as_index_list(sorted(any_unit))


def attention_mass_headwise(attn: AttentionRecord, gen, prompt) -> MassTable:
    """Per-(layer, kv head) mass each prompt position collected over ``gen``."""
    gen = tuple(int(p) for p in gen)
    prompt = as_index_list(prompt)
    if not gen:
        raise ValueError("generation set must be non-empty")
    col_of = {pos: i for i, pos in enumerate(attn.columns)}
    missing = [p for p in prompt if p not in col_of]
    if missing:
        raise MissingColumn(f"no attention columns for positions {missing}")
    row_of = {pos: i for i, pos in enumerate(attn.gen_positions)}
    missing_rows = [g for g in gen if g not in row_of]
    if missing_rows:
        raise MissingColumn(f"no attention rows for generation positions {missing_rows}")
    rows = [row_of[g] for g in gen]
    cols = [col_of[p] for p in prompt]
    per_query = attn.weights[:, :, rows, :][:, :, :, cols].sum(axis=2)
    layers, q_heads = attn.num_layers, attn.num_query_heads
    grouped = per_query.reshape(layers, attn.num_kv_heads, attn.kv_group_size, len(cols))
    grouped = grouped.sum(axis=2)
    masses = {
        (layer, head): {pos: float(grouped[layer, head, i]) for i, pos in enumerate(prompt)}
        for layer in range(layers)
        for head in range(attn.num_kv_heads)
    }
    return MassTable(granularity=HEADWISE, masses=masses)


def _summed(units: list[tuple[tuple[int, ...], Mapping[int, float]]]) -> dict[int, float]:
    first = units[0][1]
    acc = {pos: 0.0 for pos in first}
    for _, per_pos in units:
        for pos, val in per_pos.items():
            acc[pos] += val
    return acc


def aggregate_layerwise(table: MassTable) -> MassTable:
    """Sum head masses within each layer."""
    if table.granularity != HEADWISE:
        raise WrongGranularity(f"expected a headwise table, got {table.granularity!r}")
    by_layer: dict[tuple[int, ...], list] = {}
    for unit in table.units():
        by_layer.setdefault(unit[:1], []).append((unit, table.masses[unit]))
    masses = {layer: _summed(group) for layer, group in sorted(by_layer.items())}
    return MassTable(granularity=LAYERWISE, masses=masses)


def aggregate_global(table: MassTable) -> MassTable:
    """Sum masses over layers and heads.

    Computed as the layer aggregate summed once more, so the composition
    with :func:`aggregate_layerwise` is exact, not just within rounding.
    """
    layered = aggregate_layerwise(table)
    units = [(unit, layered.masses[unit]) for unit in layered.units()]
    return MassTable(granularity=GLOBAL, masses={(): _summed(units)})


def demand_sums(table: MassTable, keep, deleted) -> dict[tuple[int, ...], tuple[float, float]]:
    """Per unit, the total mass of kept and of deleted positions."""
    keep = as_index_list(keep)
    deleted = as_index_list(deleted)
    overlap = set(keep) & set(deleted)
    if overlap:
        raise ValueError(f"keep and deleted overlap at {sorted(overlap)}")
    out: dict[tuple[int, ...], tuple[float, float]] = {}
    for unit in table.units():
        per_pos = table.masses[unit]
        kept_mass = sum(per_pos.get(pos, 0.0) for pos in keep)
        deleted_mass = sum(per_pos.get(pos, 0.0) for pos in deleted)
        out[unit] = (kept_mass, deleted_mass)
    return out
