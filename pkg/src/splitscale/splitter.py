"""The split event: deterministic partitioning of chainstates and mempools.

A split takes every sub-chain at depth k to two children at depth k+1. The
cut point is either the midpoint of the parent's script-hash interval
(logical mode, equivalent to reading one more prefix bit) or the value that
halves the parent's held supply (economic mode). Every replica running the
same split on the same state produces byte-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .chain import ConsensusParams, MAX_TARGET
from .crypto import Digest256
from .ledger import (
    ChainState,
    Mempool,
    TxValidationError,
    script_hash,
    validate_transaction,
)

__all__ = [
    "SplitDirective",
    "EmptyState",
    "split_chainstate",
    "compute_economic_cut",
    "split_mempool",
    "apply_split",
    "split_params",
]


class EmptyState(Exception):
    pass


@dataclass(frozen=True)
class SplitDirective:
    activation_height: int
    mode: str  # "logical" or "economic"
    new_depth: int


def compute_economic_cut(state: ChainState) -> Digest256:
    """Smallest value b such that entries with script hash below b hold at
    least half the state's supply.

    Pinned entries sit outside this state's interval, so they are excluded
    from the tally; an all-pinned state falls back to the interval midpoint.
    """
    if not state.entries:
        raise EmptyState(f"sub-chain {state.subchain} has no entries")
    totals: dict[int, int] = {}
    for entry in state.entries.values():
        if entry.pinned:
            continue
        h = int.from_bytes(script_hash(entry.out.script_pubkey), "big")
        totals[h] = totals.get(h, 0) + entry.value
    if not totals:
        return ((state.lo + state.hi) // 2).to_bytes(32, "big")
    total = sum(totals.values())
    acc = 0
    for h in sorted(totals):
        acc += totals[h]
        if 2 * acc >= total:
            cut = h + 1
            if cut >= 1 << 256:
                raise ValueError("cut beyond the hash space")
            return cut.to_bytes(32, "big")
    raise AssertionError("unreachable: prefix sums cover the total")


def _cut_point(state: ChainState, mode: str) -> int:
    if mode == "economic":
        return int.from_bytes(compute_economic_cut(state), "big")
    return (state.lo + state.hi) // 2


def split_chainstate(
    state: ChainState, mode: str = "logical"
) -> tuple[ChainState, ChainState]:
    """Divide one chainstate into its two children, retiring the parent.

    Every entry lands in exactly one child by comparing its script hash to
    the cut point; pinned entries use the same comparison and stay pinned.
    """
    mid = _cut_point(state, mode)
    left = ChainState(
        subchain=2 * state.subchain, depth=state.depth + 1, lo=state.lo, hi=mid
    )
    right = ChainState(
        subchain=2 * state.subchain + 1, depth=state.depth + 1, lo=mid, hi=state.hi
    )
    for op, entry in state.entries.items():
        h = int.from_bytes(script_hash(entry.out.script_pubkey), "big")
        (left if h < mid else right).entries[op] = entry
    state.entries = {}
    return left, right


def split_mempool(
    pool: Mempool,
    left: ChainState,
    right: ChainState,
    height: int,
) -> tuple[Mempool, Mempool]:
    """Re-home pending transactions; anything straddling the new cut flushes."""
    pool_left = Mempool(left.subchain)
    pool_right = Mempool(right.subchain)
    for entry in pool.pending.values():
        tx = entry.tx
        for child, child_pool, sibling in (
            (left, pool_left, right),
            (right, pool_right, left),
        ):
            try:
                validate_transaction(tx, child, height, [sibling])
            except TxValidationError:
                continue
            child_pool.accept(child, tx, height, [sibling])
            break
    return pool_left, pool_right


def split_params(
    params: ConsensusParams, mode: str, cuts: Optional[list[int]] = None
) -> ConsensusParams:
    """Consensus parameters after one split.

    Each sub-chain's target doubles (half the per-chain hash rate needs a
    proportionally easier target) while the eigen target is unchanged.
    Boundaries are materialized once any split is economic; pure logical
    histories keep prefix routing.
    """
    out = params.copy()
    out.depth = params.depth + 1
    out.subchain_target = min(params.subchain_target * 2, MAX_TARGET)
    if mode == "economic" or params.boundaries:
        if cuts is None or len(cuts) != params.n_subchains:
            raise ValueError("economic split needs one cut per sub-chain")
        merged: list[int] = []
        for s in range(params.n_subchains):
            if s > 0:
                if params.boundaries:
                    merged.append(params.boundaries[s - 1])
                else:
                    span = (1 << 256) >> params.depth
                    merged.append(s * span)
            merged.append(cuts[s])
        out.boundaries = merged
    out.check()
    return out


def apply_split(
    states: dict[int, ChainState],
    mempools: dict[int, Mempool],
    params: ConsensusParams,
    directive: SplitDirective,
    tip_height: int,
    half_tracked: Optional[int] = None,
    half_keep: Optional[int] = None,
    wallet_hint: Optional[Digest256] = None,
) -> tuple[dict[int, ChainState], dict[int, Mempool], ConsensusParams, Optional[int]]:
    """Run one split event over a node's stores.

    Full nodes split everything. Half nodes (half_tracked set) split their
    single chainstate and keep one child: half_keep names it outright,
    otherwise the child holding wallet_hint's script hash, otherwise the
    even child. Returns the new stores, parameters, and the half node's new
    tracked sub-chain.
    """
    if tip_height != directive.activation_height:
        raise ValueError(
            f"split scheduled for height {directive.activation_height},"
            f" tip is {tip_height}"
        )
    if directive.new_depth != params.depth + 1:
        raise ValueError("split directives must raise depth by exactly one")
    if directive.mode not in ("logical", "economic"):
        raise ValueError(f"unknown split mode {directive.mode!r}")

    height = tip_height + 1  # mempool re-validation targets the next block
    new_states: dict[int, ChainState] = {}
    new_pools: dict[int, Mempool] = {}
    new_tracked: Optional[int] = None
    cuts: Optional[list[int]] = None
    if directive.mode == "economic" or params.boundaries:
        cuts = [_cut_point(states[s], directive.mode) for s in sorted(states)]
        if half_tracked is None and len(cuts) != params.n_subchains:
            raise ValueError("full node must hold every sub-chain to split")

    for s in sorted(states):
        left, right = split_chainstate(states[s], directive.mode)
        pool_left, pool_right = split_mempool(mempools[s], left, right, height)
        if half_tracked is not None and s == half_tracked:
            if half_keep is not None:
                if half_keep not in (left.subchain, right.subchain):
                    raise ValueError(f"half_keep {half_keep} is not a child of {s}")
                keep_left = half_keep == left.subchain
            elif wallet_hint is not None:
                keep_left = int.from_bytes(wallet_hint, "big") < left.hi
            else:
                keep_left = True
            kept_state, kept_pool = (
                (left, pool_left) if keep_left else (right, pool_right)
            )
            new_states[kept_state.subchain] = kept_state
            new_pools[kept_state.subchain] = kept_pool
            new_tracked = kept_state.subchain
        else:
            new_states[left.subchain] = left
            new_states[right.subchain] = right
            new_pools[left.subchain] = pool_left
            new_pools[right.subchain] = pool_right

    if half_tracked is not None:
        # Half nodes cannot see sibling chainstates, so they never hold the
        # global economic boundary list; routing stays local to their state.
        new_params = params.copy()
        new_params.depth = params.depth + 1
        new_params.subchain_target = min(params.subchain_target * 2, MAX_TARGET)
    else:
        new_params = split_params(params, directive.mode, cuts)
    return new_states, new_pools, new_params, new_tracked
