"""Block structures, proof of work, and atomic multi-chain mining.

A composite block is one coordinating (eigen) block plus one block per
sub-chain, all at the same height. The eigen block commits to every
sub-chain block's header hash, so the whole composite validates or fails as
a unit, and a node holding only the eigen chain can still authenticate any
single sub-chain block. Issuance lives in the eigen block's reward record;
per-sub-chain fees go to each sub-chain block's coinbase.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from . import ledger, xfer
from .crypto import ConfigError, Digest256, MAX_SPLIT_DEPTH, double_sha256, assign_subchain
from .encoding import DecodeError, Reader, ser_bytes, ser_u16, ser_u32, ser_u64
from .ledger import ChainState, Mempool, OutPoint, Script, Transaction, TxOut, UtxoEntry
from .xfer import EIGENTX_CAP, EIGENTX_FEE, Eigenpool, Eigentransaction

__all__ = [
    "MAX_TARGET",
    "BlockHeader",
    "SubchainBlock",
    "RewardRecord",
    "EigenBlock",
    "CompositeBlock",
    "ConsensusParams",
    "Tips",
    "CompositeInvalid",
    "BadArity",
    "BadPow",
    "CrossRefMismatch",
    "BadTx",
    "BadCoinbaseValue",
    "BadEigenTx",
    "HeightMismatch",
    "merkle_root",
    "mine_composite",
    "make_genesis",
    "validate_composite",
    "connect_composite",
    "disconnect_composite",
    "retarget",
    "BlockIndex",
    "IndexEntry",
    "choose_fork",
    "serialize_composite",
    "deserialize_composite",
    "serialize_eigen_block",
    "serialize_subchain_block",
]

MAX_TARGET = (1 << 256) - 1

_REWARD_TAG = b"eigen-reward:"


class CompositeInvalid(Exception):
    """Base class for composite block rejection reasons."""


class BadArity(CompositeInvalid):
    pass


class BadPow(CompositeInvalid):
    pass


class CrossRefMismatch(CompositeInvalid):
    pass


class BadTx(CompositeInvalid):
    def __init__(self, subchain: int, txid: Digest256, cause: Exception):
        super().__init__(f"sub-chain {subchain} tx {txid.hex()[:16]}: {cause}")
        self.subchain = subchain
        self.txid = txid
        self.cause = cause


class BadCoinbaseValue(CompositeInvalid):
    pass


class BadEigenTx(CompositeInvalid):
    pass


class HeightMismatch(CompositeInvalid):
    pass


def merkle_root(leaves: list[Digest256]) -> Digest256:
    """Merkle root with the duplicate-last rule for odd levels.

    A single-element tree's root is that element itself (leaves are already
    hashes).
    """
    if not leaves:
        raise ValueError("merkle tree needs at least one leaf")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [
            double_sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)
        ]
    return level[0]


@dataclass(eq=False)
class BlockHeader:
    prev_hash: Digest256
    payload_root: Digest256
    height: int
    target: int
    nonce: int = 0
    timestamp: int = 0  # simulated milliseconds

    def serialize(self) -> bytes:
        return (
            self.prev_hash
            + self.payload_root
            + ser_u32(self.height)
            + self.target.to_bytes(32, "big")
            + ser_u64(self.nonce)
            + ser_u64(self.timestamp)
        )

    def hash(self) -> Digest256:
        return double_sha256(self.serialize())

    def meets_target(self) -> bool:
        return int.from_bytes(self.hash(), "big") <= self.target


def _read_header(r: Reader) -> BlockHeader:
    return BlockHeader(
        prev_hash=r.take(32),
        payload_root=r.take(32),
        height=r.u32(),
        target=int.from_bytes(r.take(32), "big"),
        nonce=r.u64(),
        timestamp=r.u64(),
    )


@dataclass(eq=False)
class SubchainBlock:
    header: BlockHeader
    subchain: int
    txs: list[Transaction]  # first is the coinbase

    def payload_root(self) -> Digest256:
        return merkle_root([tx.txid for tx in self.txs])

    def hash(self) -> Digest256:
        return self.header.hash()


@dataclass(frozen=True)
class RewardRecord:
    payout_script: Script
    amount: int

    def serialize(self) -> bytes:
        return ser_bytes(self.payout_script.serialize()) + ser_u64(self.amount)


@dataclass(eq=False)
class EigenBlock:
    header: BlockHeader
    subchain_header_hashes: list[Digest256]
    eigentxs: list[Eigentransaction]
    reward: RewardRecord

    def payload_root(self) -> Digest256:
        leaves = list(self.subchain_header_hashes)
        leaves += [etx.etxid for etx in self.eigentxs]
        leaves.append(double_sha256(self.reward.serialize()))
        return merkle_root(leaves)

    def hash(self) -> Digest256:
        return self.header.hash()

    def reward_outpoint(self) -> OutPoint:
        return OutPoint(double_sha256(_REWARD_TAG + self.hash()), 0)


@dataclass(eq=False)
class CompositeBlock:
    eigen: EigenBlock
    subblocks: list[SubchainBlock]

    @property
    def height(self) -> int:
        return self.eigen.header.height

    def hash(self) -> Digest256:
        return self.eigen.hash()


@dataclass
class ConsensusParams:
    depth: int = 0
    subchain_target: int = MAX_TARGET >> 4
    eigen_target: int = MAX_TARGET >> 8
    partition_mode: str = "logical"
    # Sorted cut points of the script-hash space, 2**depth - 1 of them once
    # any economic split has happened; empty means pure bit-prefix routing.
    boundaries: list[int] = field(default_factory=list)
    eigentx_window: Optional[tuple[int, int]] = None
    block_tx_capacity: int = 100
    subsidy_initial: int = 50 * 10**8
    subsidy_halving: int = 210_000

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if not 0 <= self.depth <= MAX_SPLIT_DEPTH:
            raise ConfigError(f"depth {self.depth} outside [0, {MAX_SPLIT_DEPTH}]")
        if not 0 < self.eigen_target < self.subchain_target <= MAX_TARGET:
            raise ConfigError("eigen target must be strictly below subchain target")
        if self.partition_mode not in ("logical", "economic"):
            raise ConfigError(f"unknown partition mode {self.partition_mode!r}")
        if self.boundaries and len(self.boundaries) != (1 << self.depth) - 1:
            raise ConfigError("boundary count must be 2**depth - 1")

    @property
    def n_subchains(self) -> int:
        return 1 << self.depth

    def route(self, script_hash: Digest256) -> int:
        """Sub-chain owning a script hash at the current depth."""
        if self.boundaries:
            h = int.from_bytes(script_hash, "big")
            lo, hi = 0, len(self.boundaries)
            while lo < hi:
                mid = (lo + hi) // 2
                if h < self.boundaries[mid]:
                    hi = mid
                else:
                    lo = mid + 1
            return lo
        return assign_subchain(script_hash, self.depth)

    def subsidy(self, height: int) -> int:
        if height <= 0:
            return 0
        eras = (height - 1) // self.subsidy_halving
        return self.subsidy_initial >> eras

    def route_at_depth(self, script_hash: Digest256, depth: int) -> int:
        """Routing as it was `self.depth - depth` splits ago.

        Splits interleave one new cut before each surviving boundary, so the
        boundary list at an earlier depth is every second element, taken as
        many times as there were splits since.
        """
        if depth == self.depth or not self.boundaries:
            return assign_subchain(script_hash, depth)
        if depth > self.depth:
            raise ConfigError("cannot route beyond the current depth")
        boundaries = self.boundaries
        for _ in range(self.depth - depth):
            boundaries = boundaries[1::2]
        h = int.from_bytes(script_hash, "big")
        lo, hi = 0, len(boundaries)
        while lo < hi:
            mid = (lo + hi) // 2
            if h < boundaries[mid]:
                hi = mid
            else:
                lo = mid + 1
        return lo

    def copy(self) -> "ConsensusParams":
        return replace(self, boundaries=list(self.boundaries))


@dataclass
class Tips:
    """Chain heads a new composite must extend."""

    height: int
    eigen: Digest256
    subchains: dict[int, Digest256]


def _grind(header: BlockHeader, rng: random.Random) -> BlockHeader:
    header.nonce = rng.getrandbits(64)
    while not header.meets_target():
        header.nonce = (header.nonce + 1) & 0xFFFFFFFFFFFFFFFF
    return header


def mine_composite(
    mempools: dict[int, Mempool],
    params: ConsensusParams,
    payout: Script,
    rng: random.Random,
    tips: Tips,
    timestamp: int = 0,
    eigenpool: Optional[Eigenpool] = None,
) -> CompositeBlock:
    """Mine one block per sub-chain plus the eigen block that binds them.

    Each sub-chain coinbase collects that sub-chain's fees; the subsidy and
    eigentransaction fees go to the eigen reward record. Sub-chain headers
    are ground first because the eigen payload commits to their hashes.
    """
    height = tips.height + 1
    subblocks = []
    spent: set[OutPoint] = set()
    for sid in range(params.n_subchains):
        pool = mempools[sid]
        txs = pool.select_for_block(params.block_tx_capacity)
        fees = sum(pool.fee_of(tx.txid) for tx in txs)
        coinbase = ledger.make_coinbase(sid, height, [TxOut(fees, payout)])
        block_txs = [coinbase] + txs
        for tx in txs:
            spent.update(txin.prevout for txin in tx.inputs)
        header = BlockHeader(
            prev_hash=tips.subchains[sid],
            payload_root=merkle_root([tx.txid for tx in block_txs]),
            height=height,
            target=params.subchain_target,
            timestamp=timestamp,
        )
        _grind(header, rng)
        subblocks.append(SubchainBlock(header, sid, block_txs))

    etxs: list[Eigentransaction] = []
    if eigenpool is not None:
        window = params.eigentx_window
        if window is None or window[0] <= height <= window[1]:
            for etx in eigenpool.select(EIGENTX_CAP):
                if any(op in spent for op in etx.source_outpoints):
                    continue
                etxs.append(etx)
                spent.update(etx.source_outpoints)

    reward = RewardRecord(payout, params.subsidy(height) + EIGENTX_FEE * len(etxs))
    eigen = EigenBlock(
        header=BlockHeader(
            prev_hash=tips.eigen,
            payload_root=b"",
            height=height,
            target=params.eigen_target,
            timestamp=timestamp,
        ),
        subchain_header_hashes=[sb.hash() for sb in subblocks],
        eigentxs=etxs,
        reward=reward,
    )
    eigen.header.payload_root = eigen.payload_root()
    _grind(eigen.header, rng)
    return CompositeBlock(eigen, subblocks)


def make_genesis(
    funding: list[TxOut], params: ConsensusParams, seed: str = "genesis"
) -> CompositeBlock:
    """Height-0 composite whose single coinbase carries the initial funding."""
    rng = random.Random(f"{seed}:genesis")
    coinbase = ledger.make_coinbase(0, 0, list(funding))
    header = BlockHeader(
        prev_hash=b"\x00" * 32,
        payload_root=merkle_root([coinbase.txid]),
        height=0,
        target=params.subchain_target,
        timestamp=0,
    )
    _grind(header, rng)
    subblock = SubchainBlock(header, 0, [coinbase])
    payout = funding[0].script_pubkey if funding else ledger.P2pkhScript(b"\x00" * 20)
    eigen = EigenBlock(
        header=BlockHeader(
            prev_hash=b"\x00" * 32,
            payload_root=b"",
            height=0,
            target=params.eigen_target,
            timestamp=0,
        ),
        subchain_header_hashes=[subblock.hash()],
        eigentxs=[],
        reward=RewardRecord(payout, 0),
    )
    eigen.header.payload_root = eigen.payload_root()
    _grind(eigen.header, rng)
    return CompositeBlock(eigen, [subblock])


def check_coinbase_shape(tx: Transaction, subchain: int, height: int) -> None:
    if not tx.is_coinbase:
        raise ValueError("first transaction must be the coinbase")
    if (
        len(tx.inputs) != 1
        or tx.inputs[0].prevout != OutPoint(b"\x00" * 32, 0xFFFFFFFF)
        or tx.inputs[0].sequence != subchain
        or tx.locktime != height
    ):
        raise ValueError("malformed coinbase")


def validate_composite(
    cb: CompositeBlock,
    tips: Tips,
    params: ConsensusParams,
    states: dict[int, ChainState],
) -> None:
    """Validate a composite as one atomic unit against the current tips.

    Check order: arity, proof of work, header cross-references and payload
    commitments, per-sub-chain transactions, coinbase values, eigen
    transactions, height and parent linkage. Any failure rejects the whole
    composite.
    """
    n = params.n_subchains
    if len(cb.subblocks) != n or len(cb.eigen.subchain_header_hashes) != n:
        raise BadArity(
            f"expected {n} sub-chain blocks, got {len(cb.subblocks)}"
            f" with {len(cb.eigen.subchain_header_hashes)} header hashes"
        )
    for i, sb in enumerate(cb.subblocks):
        if sb.subchain != i:
            raise BadArity(f"sub-chain blocks out of order at index {i}")

    if cb.eigen.header.target != params.eigen_target:
        raise BadPow("eigen block declares a foreign target")
    if not cb.eigen.header.meets_target():
        raise BadPow("eigen header hash above target")
    for sb in cb.subblocks:
        if sb.header.target != params.subchain_target:
            raise BadPow(f"sub-chain {sb.subchain} declares a foreign target")
        if not sb.header.meets_target():
            raise BadPow(f"sub-chain {sb.subchain} header hash above target")

    for i, sb in enumerate(cb.subblocks):
        if sb.hash() != cb.eigen.subchain_header_hashes[i]:
            raise CrossRefMismatch(f"eigen commitment to sub-chain {i} does not match")
        if not sb.txs:
            raise CrossRefMismatch(f"sub-chain {i} has no transactions to commit")
        if sb.header.payload_root != sb.payload_root():
            raise CrossRefMismatch(f"sub-chain {i} payload root mismatch")
    if cb.eigen.header.payload_root != cb.eigen.payload_root():
        raise CrossRefMismatch("eigen payload root mismatch")

    height = cb.height
    sibling_states = list(states.values())
    spent: set[OutPoint] = set()
    fees_by_subchain: dict[int, int] = {}
    for sb in cb.subblocks:
        if not sb.txs:
            raise BadTx(sb.subchain, b"\x00" * 32, ValueError("empty block"))
        try:
            check_coinbase_shape(sb.txs[0], sb.subchain, height)
        except ValueError as exc:
            raise BadTx(sb.subchain, sb.txs[0].txid, exc)
        fees = 0
        seen_txids: set[Digest256] = set()
        for tx in sb.txs[1:]:
            if tx.is_coinbase:
                raise BadTx(sb.subchain, tx.txid, ValueError("extra coinbase"))
            if tx.txid in seen_txids:
                raise BadTx(sb.subchain, tx.txid, ValueError("duplicate transaction"))
            seen_txids.add(tx.txid)
            try:
                fees += ledger.validate_transaction(
                    tx, states[sb.subchain], height, sibling_states
                )
            except ledger.TxValidationError as exc:
                raise BadTx(sb.subchain, tx.txid, exc)
            for txin in tx.inputs:
                if txin.prevout in spent:
                    raise BadTx(
                        sb.subchain,
                        tx.txid,
                        ledger.DoubleSpendInBlock(f"{txin.prevout.hex()} spent twice"),
                    )
                spent.add(txin.prevout)
        fees_by_subchain[sb.subchain] = fees

    for sb in cb.subblocks:
        coinbase_total = sum(o.value for o in sb.txs[0].outputs)
        if coinbase_total != fees_by_subchain[sb.subchain]:
            raise BadCoinbaseValue(
                f"sub-chain {sb.subchain} coinbase pays {coinbase_total},"
                f" fees are {fees_by_subchain[sb.subchain]}"
            )

    if len(cb.eigen.eigentxs) > EIGENTX_CAP:
        raise BadEigenTx(f"more than {EIGENTX_CAP} eigentransactions")
    seen_etx: set[Digest256] = set()
    for etx in cb.eigen.eigentxs:
        if etx.etxid in seen_etx:
            raise BadEigenTx("duplicate eigentransaction")
        seen_etx.add(etx.etxid)
        try:
            xfer.validate_eigentx(etx, states, height, params.eigentx_window)
        except Exception as exc:
            raise BadEigenTx(str(exc))
        for op in etx.source_outpoints:
            if op in spent:
                raise BadEigenTx(f"source outpoint {op.hex()} spent in this composite")
            spent.add(op)
    expected_reward = params.subsidy(height) + EIGENTX_FEE * len(cb.eigen.eigentxs)
    if cb.eigen.reward.amount != expected_reward:
        raise BadCoinbaseValue(
            f"eigen reward {cb.eigen.reward.amount}, expected {expected_reward}"
        )

    if height != tips.height + 1:
        raise HeightMismatch(f"height {height}, tip is {tips.height}")
    for sb in cb.subblocks:
        if sb.header.height != height:
            raise HeightMismatch(f"sub-chain {sb.subchain} height {sb.header.height}")
        if sb.header.prev_hash != tips.subchains[sb.subchain]:
            raise HeightMismatch(f"sub-chain {sb.subchain} does not extend its tip")
    if cb.eigen.header.prev_hash != tips.eigen:
        raise HeightMismatch("eigen block does not extend the eigen tip")


@dataclass
class CompositeUndo:
    block_hash: Digest256
    height: int
    ops: list[tuple]


def connect_composite(
    states: dict[int, ChainState], cb: CompositeBlock, params: ConsensusParams
) -> CompositeUndo:
    """Apply every transaction of a validated composite to the chainstates.

    Created outputs are routed to whichever state owns their script hash,
    which is how value crosses sub-chains inside ordinary payments.
    """
    ops: list[tuple] = []
    height = cb.height
    try:
        for sb in cb.subblocks:
            home = states[sb.subchain]
            for tx in sb.txs:
                if not tx.is_coinbase:
                    for txin in tx.inputs:
                        entry = home.entries.pop(txin.prevout, None)
                        if entry is None:
                            raise ValueError(
                                f"connect of non-validated composite:"
                                f" missing {txin.prevout.hex()}"
                            )
                        ops.append(("del", sb.subchain, txin.prevout, entry))
                for i, out in enumerate(tx.outputs):
                    target = params.route(ledger.script_hash(out.script_pubkey))
                    op = OutPoint(tx.txid, i)
                    if op in states[target].entries:
                        raise ValueError(f"connect would overwrite {op.hex()}")
                    states[target].entries[op] = UtxoEntry(
                        out, height, coinbase=tx.is_coinbase
                    )
                    ops.append(("add", target, op))
        for etx in cb.eigen.eigentxs:
            ops.extend(xfer.apply_eigentx(states, etx, height))
        if cb.eigen.reward.amount > 0:
            target = params.route(ledger.script_hash(cb.eigen.reward.payout_script))
            op = cb.eigen.reward_outpoint()
            if op in states[target].entries:
                raise ValueError("connect would overwrite the reward outpoint")
            states[target].entries[op] = UtxoEntry(
                TxOut(cb.eigen.reward.amount, cb.eigen.reward.payout_script),
                height,
                coinbase=True,
            )
            ops.append(("add", target, op))
    except Exception:
        ledger.revert_ops(states, ops)
        raise
    return CompositeUndo(cb.hash(), height, ops)


def disconnect_composite(
    states: dict[int, ChainState], undo: CompositeUndo
) -> None:
    ledger.revert_ops(states, undo.ops)


def retarget(
    params: ConsensusParams,
    intervals_ms: list[int],
    reference_interval_ms: int = 600_000,
) -> ConsensusParams:
    """Scale both targets by observed mean interval over the reference,
    clamped to a factor of 4 per adjustment. The eigen/sub-chain ratio is
    carried through because both sides scale by the same rational."""
    if not intervals_ms:
        return params
    num = sum(intervals_ms)
    den = len(intervals_ms) * reference_interval_ms
    if num * 4 < den:
        num, den = 1, 4
    elif num > 4 * den:
        num, den = 4, 1
    new_sub = min(max(params.subchain_target * num // den, 2), MAX_TARGET)
    new_eigen = min(max(params.eigen_target * num // den, 1), MAX_TARGET)
    if new_eigen >= new_sub:
        new_eigen = new_sub - 1
    out = params.copy()
    out.subchain_target = new_sub
    out.eigen_target = new_eigen
    return out


def block_work(eigen_target: int) -> int:
    return (1 << 256) // (eigen_target + 1)


@dataclass(eq=False)
class IndexEntry:
    cb: CompositeBlock
    parent: Optional["IndexEntry"]
    height: int
    cum_work: int
    arrival: int
    valid: bool = True

    def hash(self) -> Digest256:
        return self.cb.hash()


def choose_fork(candidates: Iterable[IndexEntry]) -> IndexEntry:
    """Canonical tip: greatest cumulative eigen work, then earliest arrival
    at this node, then lowest eigen header hash."""
    best = None
    best_key = None
    for entry in candidates:
        key = (
            entry.cum_work,
            -entry.arrival,
            -int.from_bytes(entry.hash(), "big"),
        )
        if best is None or key > best_key:
            best, best_key = entry, key
    if best is None:
        raise ValueError("no candidates")
    return best


class BlockIndex:
    """All composites a node has seen, linked by eigen header hash."""

    def __init__(self, genesis: CompositeBlock):
        root = IndexEntry(
            cb=genesis,
            parent=None,
            height=genesis.height,
            cum_work=block_work(genesis.eigen.header.target),
            arrival=0,
        )
        self.entries: dict[Digest256, IndexEntry] = {genesis.hash(): root}
        self.genesis = root
        self._arrivals = 0

    def __contains__(self, block_hash: Digest256) -> bool:
        return block_hash in self.entries

    def get(self, block_hash: Digest256) -> Optional[IndexEntry]:
        return self.entries.get(block_hash)

    def add(self, cb: CompositeBlock) -> IndexEntry:
        h = cb.hash()
        existing = self.entries.get(h)
        if existing is not None:
            return existing
        parent = self.entries.get(cb.eigen.header.prev_hash)
        if parent is None:
            raise KeyError("parent composite unknown")
        self._arrivals += 1
        entry = IndexEntry(
            cb=cb,
            parent=parent,
            height=cb.height,
            cum_work=parent.cum_work + block_work(cb.eigen.header.target),
            arrival=self._arrivals,
        )
        self.entries[h] = entry
        return entry

    def best_tip(self) -> IndexEntry:
        return choose_fork(e for e in self.entries.values() if e.valid)

    def invalidate(self, entry: IndexEntry) -> None:
        """Mark a block and everything built on it unusable for fork choice."""
        entry.valid = False
        changed = True
        while changed:
            changed = False
            for e in self.entries.values():
                if e.valid and e.parent is not None and not e.parent.valid:
                    e.valid = False
                    changed = True

    def path_between(
        self, old_tip: IndexEntry, new_tip: IndexEntry
    ) -> tuple[list[IndexEntry], list[IndexEntry]]:
        """(blocks to disconnect from old, blocks to connect toward new),
        both ordered as they should be processed."""
        down: list[IndexEntry] = []
        up: list[IndexEntry] = []
        a, b = old_tip, new_tip
        while a.height > b.height:
            down.append(a)
            a = a.parent
        while b.height > a.height:
            up.append(b)
            b = b.parent
        while a is not b:
            down.append(a)
            up.append(b)
            a = a.parent
            b = b.parent
        up.reverse()
        return down, up


def serialize_subchain_block(sb: SubchainBlock) -> bytes:
    out = bytearray()
    out += sb.header.serialize()
    out += ser_u16(sb.subchain)
    out += ser_u32(len(sb.txs))
    for tx in sb.txs:
        out += ser_bytes(tx.serialize())
    return bytes(out)


def _read_subchain_block(r: Reader) -> SubchainBlock:
    header = _read_header(r)
    subchain = r.u16()
    txs = [ledger.deserialize_tx(r.bytes_()) for _ in range(r.u32())]
    return SubchainBlock(header, subchain, txs)


def serialize_eigen_block(eb: EigenBlock) -> bytes:
    out = bytearray()
    out += eb.header.serialize()
    out += ser_u16(len(eb.subchain_header_hashes))
    for h in eb.subchain_header_hashes:
        out += h
    out += ser_u32(len(eb.eigentxs))
    for etx in eb.eigentxs:
        out += ser_bytes(etx.serialize())
    out += eb.reward.serialize()
    return bytes(out)


def _read_eigen_block(r: Reader) -> EigenBlock:
    header = _read_header(r)
    hashes = [r.take(32) for _ in range(r.u16())]
    etxs = []
    for _ in range(r.u32()):
        er = Reader(r.bytes_())
        etx = xfer.read_eigentx(er)
        er.expect_done()
        etxs.append(etx)
    script = ledger.script_from_bytes(r.bytes_())
    amount = r.u64()
    return EigenBlock(header, hashes, etxs, RewardRecord(script, amount))


def serialize_composite(cb: CompositeBlock) -> bytes:
    """Length-prefixed eigen block followed by sub-chain blocks in order.

    This is the byte payload whose length the network simulator charges for
    full block messages.
    """
    out = bytearray()
    out += ser_bytes(serialize_eigen_block(cb.eigen))
    out += ser_u16(len(cb.subblocks))
    for sb in cb.subblocks:
        out += ser_bytes(serialize_subchain_block(sb))
    return bytes(out)


def deserialize_composite(data: bytes) -> CompositeBlock:
    r = Reader(data)
    er = Reader(r.bytes_())
    eigen = _read_eigen_block(er)
    er.expect_done()
    subblocks = []
    for _ in range(r.u16()):
        sr = Reader(r.bytes_())
        subblocks.append(_read_subchain_block(sr))
        sr.expect_done()
    r.expect_done()
    return CompositeBlock(eigen, subblocks)
