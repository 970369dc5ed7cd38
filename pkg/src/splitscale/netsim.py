"""Deterministic discrete-event simulation of the node network.

Miners, full nodes, and half nodes exchange transactions and blocks over a
static topology with per-link latencies. All randomness comes from seeded
generators, all times are integer milliseconds, and events at equal times
are ordered by node id then sequence number, so a config maps to exactly
one trace. Mining completion times are sampled from an exponential
distribution computed in fixed-point integer arithmetic; the blocks
themselves carry genuine proof of work at the configured targets.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from . import chain, ledger, splitter, xfer
from .chain import (
    BlockIndex,
    CompositeBlock,
    CompositeUndo,
    ConsensusParams,
    IndexEntry,
    Tips,
)
from .crypto import ConfigError, Digest256, double_sha256
from .encoding import ser_bytes
from .ledger import ChainState, Mempool, OutPoint, Transaction, TxOut
from .splitter import SplitDirective
from .xfer import Eigenpool, Eigentransaction, HtlcPayment, Wallet

__all__ = [
    "NodeSpec",
    "LinkSpec",
    "WalletSpec",
    "PayAction",
    "EigentxAction",
    "SimConfig",
    "NodeStats",
    "SimNode",
    "SimReport",
    "Simulation",
    "run_simulation",
    "replay_chain",
    "det_exp_delay",
]

log = logging.getLogger("splitscale.netsim")

ROLE_MINER = "miner"
ROLE_FULL = "full"
ROLE_HALF = "half"

MSG_TX = "tx"
MSG_EIGENTX = "eigentx"
MSG_BLOCK = "block"
MSG_BLOCK_N = "blockn"

# How many blocks a wallet keeps an outpoint reserved for an unconfirmed
# spend before retrying it.
_COMMIT_TTL = 20
_RETARGET_WINDOW = 20

# ln(2) in 32-bit fixed point; a literal so every platform agrees bit for bit.
_LN2_FP32 = 2977044472
_FP = 32


def _log2_fp32(x: int) -> int:
    """floor(log2(x) * 2**32) via shift-and-square integer arithmetic."""
    n = x.bit_length() - 1
    m = (x << 64) >> n  # mantissa in [2**64, 2**65)
    out = n << _FP
    bit = 1 << (_FP - 1)
    for _ in range(_FP):
        m = (m * m) >> 64
        if m >= 1 << 65:
            m >>= 1
            out |= bit
        bit >>= 1
    return out


def det_exp_delay(rng: random.Random, mean_ms: int) -> int:
    """Exponential delay in whole ms using only integer arithmetic.

    Floating point would tie the trace to the host libm; this keeps run
    digests identical across machines.
    """
    u = rng.getrandbits(53) + 1  # uniform in [1, 2**53]
    neg_ln = ((53 << _FP) - _log2_fp32(u)) * _LN2_FP32 >> _FP
    return max(1, (mean_ms * neg_ln) >> _FP)


@dataclass
class NodeSpec:
    node_id: str
    role: str
    hashpower: Fraction = Fraction(0)
    track: int = 0  # half nodes: sub-chain id at the deepest configured depth


@dataclass
class LinkSpec:
    a: str
    b: str
    latency_ms: int = 20
    up_at_ms: int = 0  # link carries nothing before this simulated time


@dataclass
class WalletSpec:
    name: str
    funds: int
    utxos: int = 1
    node: Optional[str] = None  # home node; default first full node
    seed: Optional[bytes] = None


@dataclass
class PayAction:
    at_height: int
    sender: str
    receiver: str
    amount: int
    fee: int = 200


@dataclass
class EigentxAction:
    at_height: int
    wallet: str
    source: int
    dest: int
    amount: int


@dataclass
class SimConfig:
    seed: str = "0"
    duration_ms: int = 60_000
    interval_ms: int = 6_000  # compressed composite block interval
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    wallets: list[WalletSpec] = field(default_factory=list)
    demand_mean_ms: Optional[int] = None  # mean tx inter-arrival per wallet
    splits: list[SplitDirective] = field(default_factory=list)
    pays: list[PayAction] = field(default_factory=list)
    eigentxs: list[EigentxAction] = field(default_factory=list)
    params: ConsensusParams = field(default_factory=ConsensusParams)

    def final_depth(self) -> int:
        return self.params.depth + len(self.splits)

    def validate(self) -> list[str]:
        """Collect every configuration problem; empty list means runnable."""
        problems = []
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            problems.append("duplicate node ids")
        roles = {n.node_id: n.role for n in self.nodes}
        if not any(r == ROLE_MINER for r in roles.values()):
            problems.append("no miner configured")
        for n in self.nodes:
            if n.role not in (ROLE_MINER, ROLE_FULL, ROLE_HALF):
                problems.append(f"{n.node_id}: unknown role {n.role!r}")
            if n.role == ROLE_MINER and n.hashpower <= 0:
                problems.append(f"{n.node_id}: miner needs positive hashpower")
            if n.role == ROLE_HALF and not 0 <= n.track < (1 << self.final_depth()):
                problems.append(f"{n.node_id}: tracked sub-chain out of range")
        neighbors: dict[str, set[str]] = {i: set() for i in ids}
        for l in self.links:
            if l.a not in roles or l.b not in roles:
                problems.append(f"link {l.a}-{l.b}: unknown node")
                continue
            if l.a == l.b:
                problems.append(f"link {l.a}-{l.b}: self link")
            if l.latency_ms <= 0:
                problems.append(f"link {l.a}-{l.b}: latency must be positive")
            neighbors[l.a].add(l.b)
            neighbors[l.b].add(l.a)
        if ids:
            reached = {ids[0]}
            frontier = [ids[0]]
            while frontier:
                cur = frontier.pop()
                for other in neighbors[cur]:
                    if other not in reached:
                        reached.add(other)
                        frontier.append(other)
            if reached != set(ids):
                problems.append("topology is not connected")
        for n in self.nodes:
            if n.role == ROLE_HALF and not any(
                roles[o] in (ROLE_FULL, ROLE_MINER) for o in neighbors[n.node_id]
            ):
                problems.append(f"{n.node_id}: half node needs a full or miner neighbor")
        names = [w.name for w in self.wallets]
        if len(set(names)) != len(names):
            problems.append("duplicate wallet names")
        for w in self.wallets:
            if w.node is not None and w.node not in roles:
                problems.append(f"wallet {w.name}: unknown home node {w.node}")
            if w.funds <= 0 or w.utxos <= 0:
                problems.append(f"wallet {w.name}: funds and utxos must be positive")
        prev_height = 0
        depth = self.params.depth
        for d in self.splits:
            if d.activation_height <= prev_height:
                problems.append("split heights must be strictly increasing")
            if d.new_depth != depth + 1:
                problems.append("split depths must increase by one")
            prev_height = d.activation_height
            depth = d.new_depth
        for p in self.pays:
            if p.sender not in names or p.receiver not in names:
                problems.append(f"pay at {p.at_height}: unknown wallet")
        for e in self.eigentxs:
            if e.wallet not in names:
                problems.append(f"eigentx at {e.at_height}: unknown wallet {e.wallet}")
            if e.source == e.dest:
                problems.append(f"eigentx at {e.at_height}: source equals dest")
        if self.duration_ms <= 0:
            problems.append("duration must be positive")
        if self.interval_ms <= 0:
            problems.append("interval must be positive")
        return problems


@dataclass
class NodeStats:
    bytes_in: dict[str, int] = field(default_factory=dict)
    bytes_out: dict[str, int] = field(default_factory=dict)
    msgs_in: dict[str, int] = field(default_factory=dict)
    blocks_validated: int = 0
    blocks_rejected: int = 0
    txs_confirmed: int = 0
    txs_rejected: int = 0
    reorgs: int = 0
    refused_reorgs: int = 0
    # cumulative block+blockn bytes received, keyed by connected height
    block_bytes_at: dict[int, int] = field(default_factory=dict)

    def count_in(self, kind: str, size: int) -> None:
        self.bytes_in[kind] = self.bytes_in.get(kind, 0) + size
        self.msgs_in[kind] = self.msgs_in.get(kind, 0) + 1

    def count_out(self, kind: str, size: int) -> None:
        self.bytes_out[kind] = self.bytes_out.get(kind, 0) + size

    def block_bytes_in(self) -> int:
        return self.bytes_in.get(MSG_BLOCK, 0) + self.bytes_in.get(MSG_BLOCK_N, 0)


class Message:
    """A payload plus its canonical wire size, shared between deliveries."""

    __slots__ = ("kind", "payload", "size", "digest")

    def __init__(self, kind: str, payload, size: int, digest: Digest256):
        self.kind = kind
        self.payload = payload
        self.size = size
        self.digest = digest

    @classmethod
    def tx(cls, tx: Transaction, subchain: int) -> "Message":
        return cls(MSG_TX, (tx, subchain), tx.size(), tx.txid)

    @classmethod
    def eigentx(cls, etx: Eigentransaction) -> "Message":
        return cls(MSG_EIGENTX, etx, len(etx.serialize()), etx.etxid)

    @classmethod
    def block(cls, cb: CompositeBlock) -> "Message":
        return cls(MSG_BLOCK, cb, len(chain.serialize_composite(cb)), cb.hash())

    @classmethod
    def block_n(
        cls, cb: CompositeBlock, subchain: int, route: Callable[[Digest256], int]
    ) -> "Message":
        """Eigen block, one sub-chain block, and the outputs other sub-chain
        blocks routed into that chain in the same composite.

        Without the inbound section a half node's chainstate would silently
        miss entries created for it by foreign blocks and reject their later
        spends.
        """
        sb = cb.subblocks[subchain]
        inbound: list[tuple[OutPoint, TxOut, bool]] = []
        size = len(
            ser_bytes(chain.serialize_eigen_block(cb.eigen))
            + ser_bytes(chain.serialize_subchain_block(sb))
        )
        for other in cb.subblocks:
            if other.subchain == subchain:
                continue
            for tx in other.txs:
                for i, out in enumerate(tx.outputs):
                    if route(ledger.script_hash(out.script_pubkey)) == subchain:
                        inbound.append((OutPoint(tx.txid, i), out, tx.is_coinbase))
                        size += 36 + 1 + len(out.serialize())
        return cls(
            MSG_BLOCK_N,
            (cb.eigen, sb, inbound),
            size,
            double_sha256(cb.hash() + sb.hash()),
        )


class _Trace:
    """Append-only event log hashed incrementally; the report digest is the
    double SHA-256 of the log bytes."""

    def __init__(self, sink=None, keep: bool = False):
        self._sha = hashlib.sha256()
        self._sink = sink
        self._lines: Optional[list[str]] = [] if keep else None
        self.events = 0

    def emit(self, ts: int, node: str, kind: str, size: int, digest: Digest256) -> None:
        line = f"{ts} {node} {kind} {size} {digest.hex()}\n"
        self._sha.update(line.encode())
        if self._sink is not None:
            self._sink.write(line)
        if self._lines is not None:
            self._lines.append(line)
        self.events += 1

    def digest(self) -> Digest256:
        return hashlib.sha256(self._sha.digest()).digest()

    def lines(self) -> list[str]:
        return list(self._lines or [])


class SimNode:
    """One simulated peer: chain storage, pools, and message handling."""

    def __init__(self, spec: NodeSpec, sim: "Simulation"):
        self.spec = spec
        self.sim = sim
        self.node_id = spec.node_id
        self.role = spec.role
        self.params = sim.config.params.copy()
        self.stats = NodeStats()
        self.tracked: Optional[int] = 0 if spec.role == ROLE_HALF else None
        self.track_target = spec.track
        self.last_split_height = -1
        self.pending_splits: list[SplitDirective] = list(sim.config.splits)
        self.seen: set[Digest256] = set()
        self.link_sent: dict[str, set[Digest256]] = {}
        self.orphans: dict[Digest256, list[CompositeBlock]] = {}
        self.requested: set[Digest256] = set()
        # half nodes: foreign-created outputs per block hash, from block-n
        self.inbound_by_hash: dict[Digest256, list] = {}
        self.wallets: list[Wallet] = []
        self.wallet_by_script: dict = {}
        self.mine_epoch = 0
        self.mine_rng = random.Random(f"{sim.config.seed}:mine:{self.node_id}")
        self.time_rng = random.Random(f"{sim.config.seed}:time:{self.node_id}")
        self.payout: Optional[Wallet] = None

        genesis = sim.genesis
        if self.role == ROLE_HALF:
            genesis = CompositeBlock(genesis.eigen, [genesis.subblocks[0]])
        self.states: dict[int, ChainState] = {0: ChainState.genesis()}
        self.mempools: dict[int, Mempool] = {0: Mempool(0)}
        self.eigenpool: Optional[Eigenpool] = (
            Eigenpool() if self.role != ROLE_HALF else None
        )
        chain.connect_composite(self.states, sim.genesis, self.params)
        self.index = BlockIndex(genesis)
        self.tips = Tips(
            height=0,
            eigen=genesis.hash(),
            subchains={0: sim.genesis.subblocks[0].hash()},
        )
        # (block hash, undo, params before post-connect steps, tips before)
        self.undo_stack: list[tuple[Digest256, CompositeUndo, ConsensusParams, Tips]] = []
        self.issued = sim.genesis_funding

    # -- helpers -----------------------------------------------------------

    def neighbors(self) -> list[str]:
        return self.sim.neighbors[self.node_id]

    def is_block_peer(self) -> bool:
        return self.role in (ROLE_MINER, ROLE_FULL)

    def _sent_set(self, other: str) -> set[Digest256]:
        s = self.link_sent.get(other)
        if s is None:
            s = set()
            self.link_sent[other] = s
        return s

    def note_seen_from(self, other: str, digest: Digest256) -> None:
        # The peer already holds this item; never echo it back on this link.
        self._sent_set(other).add(digest)

    def send(self, other: str, msg: Message) -> bool:
        sent = self._sent_set(other)
        if msg.digest in sent:
            return False
        sent.add(msg.digest)
        self.stats.count_out(msg.kind, msg.size)
        self.sim.deliver_later(self.node_id, other, msg)
        return True

    def gossip(self, msg: Message, exclude: Optional[str] = None) -> None:
        """Flood to relevant neighbors; relevance depends on role and kind."""
        for other in self.neighbors():
            if other == exclude:
                continue
            if not self.sim.link_up(self.node_id, other):
                continue
            peer = self.sim.nodes[other]
            if msg.kind in (MSG_BLOCK, MSG_EIGENTX) and not peer.is_block_peer():
                continue
            if msg.kind == MSG_TX and peer.role == ROLE_HALF:
                if peer.tracked != msg.payload[1]:
                    continue
            if msg.kind == MSG_BLOCK_N:
                continue  # block-n messages are addressed, never flooded
            self.send(other, msg)

    # -- message handlers --------------------------------------------------

    def on_message(self, origin: str, msg: Message) -> None:
        self.stats.count_in(msg.kind, msg.size)
        self.sim.trace.emit(self.sim.now, self.node_id, msg.kind, msg.size, msg.digest)
        self.note_seen_from(origin, msg.digest)
        if msg.digest in self.seen:
            return
        if msg.kind == MSG_TX:
            self.handle_tx(msg, origin)
        elif msg.kind == MSG_EIGENTX:
            self.handle_eigentx(msg, origin)
        elif msg.kind == MSG_BLOCK:
            self.handle_block(msg.payload, origin)
        elif msg.kind == MSG_BLOCK_N:
            eigen, sb, inbound = msg.payload
            self.handle_block_n(eigen, sb, inbound, origin, msg.digest)

    def handle_tx(self, msg: Message, origin: str) -> None:
        tx, subchain = msg.payload
        self.seen.add(msg.digest)
        if self.role == ROLE_HALF:
            if subchain != self.tracked:
                return
            local = self.tracked
        else:
            if subchain >= self.params.n_subchains:
                self.stats.txs_rejected += 1
                return
            local = subchain
        pool = self.mempools.get(local)
        state = self.states.get(local)
        if pool is None or state is None:
            self.stats.txs_rejected += 1
            return
        try:
            pool.accept(state, tx, self.tips.height + 1, list(self.states.values()))
        except ledger.TxValidationError:
            self.stats.txs_rejected += 1
            return
        if self.is_block_peer():
            self.gossip(msg, exclude=origin)

    def handle_eigentx(self, msg: Message, origin: str) -> None:
        etx = msg.payload
        self.seen.add(msg.digest)
        if self.eigenpool is None:
            return
        try:
            self.eigenpool.accept(
                etx, self.states, self.tips.height + 1, self.params.eigentx_window
            )
        except Exception:
            self.stats.txs_rejected += 1
            return
        self.gossip(msg, exclude=origin)

    def handle_block(self, cb: CompositeBlock, origin: Optional[str]) -> None:
        h = cb.hash()
        self.seen.add(h)
        self.requested.discard(h)
        if cb.eigen.header.prev_hash not in self.index.entries:
            self.orphans.setdefault(cb.eigen.header.prev_hash, []).append(cb)
            self._request_parent(cb.eigen.header.prev_hash, origin)
            return
        self.index.add(cb)
        self.reorganize()
        self._drain_orphans(h)

    def _request_parent(self, parent_hash: Digest256, origin: Optional[str]) -> None:
        """Ask the sender for a missing ancestor.

        Requests ride the control plane with zero wire size (inventory
        chatter is not modeled); the replies are ordinary block messages and
        are charged normally.
        """
        if origin is None or parent_hash in self.requested:
            return
        self.requested.add(parent_hash)
        link = self.sim.link_latency(self.node_id, origin)
        self.sim.trace.emit(self.sim.now, self.node_id, "sync", 0, parent_hash)
        self.sim.schedule(
            self.sim.now + link,
            origin,
            self.sim.nodes[origin].on_block_request,
            self.node_id,
            parent_hash,
        )

    def on_block_request(self, requester: str, block_hash: Digest256) -> None:
        entry = self.index.get(block_hash)
        if entry is None:
            return
        peer = self.sim.nodes[requester]
        if peer.role == ROLE_HALF:
            tracked = peer.tracked
            if tracked is not None and tracked < len(entry.cb.subblocks):
                self.send(requester, self._block_n_for(entry.cb, tracked))
        else:
            self.send(requester, Message.block(entry.cb))

    def _block_n_for(self, cb: CompositeBlock, tracked: int) -> Message:
        depth = len(cb.subblocks).bit_length() - 1
        return Message.block_n(
            cb, tracked, lambda h: self.params.route_at_depth(h, depth)
        )

    def handle_block_n(
        self, eigen, sb, inbound, origin: Optional[str], digest: Digest256
    ) -> None:
        self.seen.add(digest)
        try:
            self._check_block_n_shape(eigen, sb)
        except chain.CompositeInvalid:
            self.stats.blocks_rejected += 1
            return
        cb = CompositeBlock(eigen, [sb])
        h = cb.hash()
        self.requested.discard(h)
        if h in self.index.entries:
            return
        self.inbound_by_hash[h] = inbound
        if eigen.header.prev_hash not in self.index.entries:
            self.orphans.setdefault(eigen.header.prev_hash, []).append(cb)
            self._request_parent(eigen.header.prev_hash, origin)
            return
        self.index.add(cb)
        self.reorganize()
        self._drain_orphans(h)

    def _drain_orphans(self, connected_hash: Digest256) -> None:
        waiting = self.orphans.pop(connected_hash, None)
        if not waiting:
            return
        for cb in waiting:
            if cb.hash() in self.index.entries:
                continue
            self.index.add(cb)
            self.reorganize()
            self._drain_orphans(cb.hash())

    def _check_block_n_shape(self, eigen, sb) -> None:
        """Stateless checks a half node can run from the eigen commitment."""
        assert self.tracked is not None
        if len(eigen.subchain_header_hashes) != self.params.n_subchains:
            raise chain.BadArity("eigen header count does not match depth")
        if sb.subchain != self.tracked:
            raise chain.BadArity("block-n carries a foreign sub-chain block")
        if eigen.header.target != self.params.eigen_target:
            raise chain.BadPow("eigen target mismatch")
        if not eigen.header.meets_target():
            raise chain.BadPow("eigen header above target")
        if sb.header.target != self.params.subchain_target:
            raise chain.BadPow("sub-chain target mismatch")
        if not sb.header.meets_target():
            raise chain.BadPow("sub-chain header above target")
        if eigen.subchain_header_hashes[self.tracked] != sb.hash():
            raise chain.CrossRefMismatch("eigen does not commit to this block")
        if not sb.txs:
            raise chain.CrossRefMismatch("sub-chain block has no transactions")
        if sb.header.payload_root != sb.payload_root():
            raise chain.CrossRefMismatch("sub-chain payload root mismatch")
        if eigen.header.payload_root != eigen.payload_root():
            raise chain.CrossRefMismatch("eigen payload root mismatch")
        if sb.header.height != eigen.header.height:
            raise chain.HeightMismatch("half block heights differ")

    # -- chain management --------------------------------------------------

    def reorganize(self) -> None:
        """Adopt the best tip, disconnecting and connecting as needed."""
        while True:
            best = self.index.best_tip()
            current = self.index.entries[self.tips.eigen]
            if best is current:
                return
            down, up = self.index.path_between(current, best)
            fork_height = current.height - len(down)
            if down and fork_height < self.last_split_height:
                # Disconnecting across a split would need an un-split; keep
                # the current chain instead.
                self.stats.refused_reorgs += 1
                return
            connected: list[IndexEntry] = []
            failed = None
            for entry in down:
                self._disconnect_tip(entry)
            for entry in up:
                if not self._connect(entry, validate=True):
                    failed = entry
                    break
                connected.append(entry)
            if failed is None:
                if down:
                    self.stats.reorgs += 1
                    self.sim.trace.emit(
                        self.sim.now, self.node_id, "reorg", 0, best.hash()
                    )
                return
            # Roll back the partial switch, then retry with the bad branch
            # marked invalid.
            for entry in reversed(connected):
                self._disconnect_tip(entry)
            for entry in reversed(down):
                ok = self._connect(entry, validate=False)
                if not ok:
                    raise ledger.AuditError("reconnect of previous chain failed")
            self.index.invalidate(failed)
            self.stats.blocks_rejected += 1

    def _disconnect_tip(self, entry: IndexEntry) -> None:
        block_hash, undo, prev_params, prev_tips = self.undo_stack.pop()
        if block_hash != entry.hash():
            raise ledger.AuditError("undo stack out of sync with reorg path")
        chain.disconnect_composite(self.states, undo)
        self.params = prev_params
        self.tips = prev_tips
        self.issued -= self.params.subsidy(entry.height)
        self._wallet_ops(undo.ops, reverse=True)
        # Give the disconnected transactions a chance to confirm again.
        for sb in entry.cb.subblocks:
            pool = self.mempools.get(sb.subchain)
            if pool is None:
                continue
            for tx in sb.txs[1:]:
                try:
                    pool.accept(
                        self.states[sb.subchain],
                        tx,
                        self.tips.height + 1,
                        list(self.states.values()),
                    )
                except ledger.TxValidationError:
                    pass

    def _connect(self, entry: IndexEntry, validate: bool) -> bool:
        cb = entry.cb
        if validate:
            try:
                if self.role == ROLE_HALF:
                    self._validate_half(cb)
                else:
                    chain.validate_composite(cb, self.tips, self.params, self.states)
            except chain.CompositeInvalid as exc:
                log.debug("%s rejects %s: %s", self.node_id, cb.hash().hex()[:12], exc)
                return False
        prev_params = self.params.copy()
        prev_tips = self.tips
        if self.role == ROLE_HALF:
            undo = self._connect_half(cb)
        else:
            undo = chain.connect_composite(self.states, cb, self.params)
        self.undo_stack.append((cb.hash(), undo, prev_params, prev_tips))
        self.issued += self.params.subsidy(cb.height)
        if self.role == ROLE_HALF:
            assert self.tracked is not None
            sub_tips = {self.tracked: cb.subblocks[0].hash()}
        else:
            sub_tips = {sb.subchain: sb.hash() for sb in cb.subblocks}
        self.tips = Tips(cb.height, cb.hash(), sub_tips)
        self._post_connect(cb, entry)
        return True

    def _validate_half(self, cb: CompositeBlock) -> None:
        assert self.tracked is not None
        eigen, sb = cb.eigen, cb.subblocks[0]
        self._check_block_n_shape(eigen, sb)
        height = eigen.header.height
        if height != self.tips.height + 1:
            raise chain.HeightMismatch(f"height {height}, tip {self.tips.height}")
        if eigen.header.prev_hash != self.tips.eigen:
            raise chain.HeightMismatch("does not extend the eigen tip")
        if sb.header.prev_hash != self.tips.subchains[self.tracked]:
            raise chain.HeightMismatch("does not extend the tracked sub-chain")
        state = self.states[self.tracked]
        if not sb.txs:
            raise chain.BadTx(self.tracked, b"\x00" * 32, ValueError("empty block"))
        try:
            chain.check_coinbase_shape(sb.txs[0], self.tracked, height)
        except ValueError as exc:
            raise chain.BadTx(self.tracked, sb.txs[0].txid, exc)
        fees = 0
        spent: set[OutPoint] = set()
        for tx in sb.txs[1:]:
            if tx.is_coinbase:
                raise chain.BadTx(self.tracked, tx.txid, ValueError("extra coinbase"))
            try:
                fees += ledger.validate_transaction(tx, state, height)
            except ledger.TxValidationError as exc:
                raise chain.BadTx(self.tracked, tx.txid, exc)
            for txin in tx.inputs:
                if txin.prevout in spent:
                    raise chain.BadTx(
                        self.tracked,
                        tx.txid,
                        ledger.DoubleSpendInBlock(f"{txin.prevout.hex()} spent twice"),
                    )
                spent.add(txin.prevout)
        coinbase_total = sum(o.value for o in sb.txs[0].outputs)
        if coinbase_total != fees:
            raise chain.BadCoinbaseValue(
                f"coinbase pays {coinbase_total}, fees are {fees}"
            )
        if len(eigen.eigentxs) > xfer.EIGENTX_CAP:
            raise chain.BadEigenTx("over eigentransaction capacity")
        expected = self.params.subsidy(height) + xfer.EIGENTX_FEE * len(eigen.eigentxs)
        if eigen.reward.amount != expected:
            raise chain.BadCoinbaseValue(
                f"reward {eigen.reward.amount}, expected {expected}"
            )
        for etx in eigen.eigentxs:
            if etx.source == self.tracked:
                # Spends on the tracked chain must be verifiable locally.
                try:
                    xfer.validate_eigentx(
                        etx,
                        {etx.source: state, etx.dest: ChainState(etx.dest, 0, 0, 0)},
                        height,
                        self.params.eigentx_window,
                    )
                except Exception as exc:
                    raise chain.BadEigenTx(str(exc))
                for op in etx.source_outpoints:
                    if op in spent:
                        raise chain.BadEigenTx("eigentransaction double spend")
                    spent.add(op)

    def _connect_half(self, cb: CompositeBlock) -> CompositeUndo:
        """Apply the tracked sub-chain's slice of a composite."""
        assert self.tracked is not None
        state = self.states[self.tracked]
        height = cb.height
        ops: list[tuple] = []
        try:
            sb = cb.subblocks[0]
            for tx in sb.txs:
                if not tx.is_coinbase:
                    for txin in tx.inputs:
                        entry = state.entries.pop(txin.prevout, None)
                        if entry is None:
                            raise ValueError(f"missing input {txin.prevout.hex()}")
                        ops.append(("del", self.tracked, txin.prevout, entry))
                for i, out in enumerate(tx.outputs):
                    if state.owns(ledger.script_hash(out.script_pubkey)):
                        op = OutPoint(tx.txid, i)
                        state.entries[op] = ledger.UtxoEntry(
                            out, height, coinbase=tx.is_coinbase
                        )
                        ops.append(("add", self.tracked, op))
            for op, out, is_coinbase in self.inbound_by_hash.get(cb.hash(), []):
                if not state.owns(ledger.script_hash(out.script_pubkey)):
                    raise ValueError(f"inbound output {op.hex()} not owned here")
                if op in state.entries:
                    raise ValueError(f"inbound output {op.hex()} already present")
                state.entries[op] = ledger.UtxoEntry(out, height, coinbase=is_coinbase)
                ops.append(("add", self.tracked, op))
            for etx in cb.eigen.eigentxs:
                h = ledger.script_hash(etx.owner_script)
                if etx.source == self.tracked:
                    total = 0
                    for op in etx.source_outpoints:
                        entry = state.entries.pop(op, None)
                        if entry is None:
                            raise ValueError(f"missing eigentx source {op.hex()}")
                        ops.append(("del", self.tracked, op, entry))
                        total += entry.value
                    change = total - etx.amount - xfer.EIGENTX_FEE
                    if change > 0:
                        cop = OutPoint(etx.etxid, 1)
                        state.entries[cop] = ledger.UtxoEntry(
                            TxOut(change, etx.owner_script),
                            height,
                            pinned=not state.owns(h),
                        )
                        ops.append(("add", self.tracked, cop))
                if etx.dest == self.tracked:
                    dop = OutPoint(etx.etxid, 0)
                    state.entries[dop] = ledger.UtxoEntry(
                        TxOut(etx.amount, etx.owner_script),
                        height,
                        pinned=not state.owns(h),
                    )
                    ops.append(("add", self.tracked, dop))
            if cb.eigen.reward.amount > 0:
                h = ledger.script_hash(cb.eigen.reward.payout_script)
                if state.owns(h):
                    rop = cb.eigen.reward_outpoint()
                    state.entries[rop] = ledger.UtxoEntry(
                        TxOut(cb.eigen.reward.amount, cb.eigen.reward.payout_script),
                        height,
                        coinbase=True,
                    )
                    ops.append(("add", self.tracked, rop))
        except Exception:
            ledger.revert_ops(self.states, ops)
            raise
        return CompositeUndo(cb.hash(), height, ops)

    def _post_connect(self, cb: CompositeBlock, entry: IndexEntry) -> None:
        height = cb.height
        self.stats.blocks_validated += 1
        self.stats.txs_confirmed += sum(len(sb.txs) - 1 for sb in cb.subblocks)
        self.stats.block_bytes_at[height] = self.stats.block_bytes_in()
        self.sim.trace.emit(self.sim.now, self.node_id, "connect", 0, cb.hash())

        spent: list[OutPoint] = []
        for sb in cb.subblocks:
            for tx in sb.txs[1:]:
                spent.extend(txin.prevout for txin in tx.inputs)
        for etx in cb.eigen.eigentxs:
            spent.extend(etx.source_outpoints)
        for pool in self.mempools.values():
            pool.remove_spent(spent)
        if self.eigenpool is not None:
            self.eigenpool.remove_spent(spent)

        undo = self.undo_stack[-1][1]
        self._wallet_ops(undo.ops, reverse=False)

        if height > 0 and height % _RETARGET_WINDOW == 0:
            self._retarget(entry)
        for directive in list(self.pending_splits):
            if directive.activation_height == height:
                self._apply_split(directive)
                self.pending_splits.remove(directive)

        if self.is_block_peer():
            self.gossip(Message.block(cb))
            for other in self.neighbors():
                peer = self.sim.nodes[other]
                if peer.role == ROLE_HALF and self.sim.link_up(self.node_id, other):
                    tracked = peer.tracked
                    if tracked is not None and tracked < len(cb.subblocks):
                        self.send(other, self._block_n_for(cb, tracked))

        self.sim.on_connect(self, cb)
        if self.role == ROLE_MINER:
            self.schedule_mining()

    def _retarget(self, entry: IndexEntry) -> None:
        node = entry
        timestamps = [node.cb.eigen.header.timestamp]
        for _ in range(_RETARGET_WINDOW):
            node = node.parent
            if node is None:
                return
            timestamps.append(node.cb.eigen.header.timestamp)
        intervals = [
            timestamps[i] - timestamps[i + 1] for i in range(_RETARGET_WINDOW)
        ]
        self.params = chain.retarget(
            self.params, intervals, self.sim.config.interval_ms
        )

    def _apply_split(self, directive: SplitDirective) -> None:
        half_keep = None
        if self.role == ROLE_HALF:
            shift = self.sim.config.final_depth() - directive.new_depth
            half_keep = self.track_target >> shift
        states, pools, params, tracked = splitter.apply_split(
            self.states,
            self.mempools,
            self.params,
            directive,
            self.tips.height,
            half_tracked=self.tracked,
            half_keep=half_keep,
        )
        self.states = states
        self.mempools = pools
        self.params = params
        self.tracked = tracked
        self.last_split_height = directive.activation_height
        if self.role == ROLE_HALF:
            assert tracked is not None
            old_tip = self.tips.subchains[tracked // 2]
            sub_tips = {tracked: old_tip}
        else:
            sub_tips = {}
            for old, h in self.tips.subchains.items():
                sub_tips[2 * old] = h
                sub_tips[2 * old + 1] = h
        self.tips = Tips(self.tips.height, self.tips.eigen, sub_tips)
        if self.eigenpool is not None:
            # Sub-chain ids renumber at a split; queued transfers are stale.
            self.eigenpool = Eigenpool()
        for wallet in self.wallets:
            self.sim.wallet_views[wallet.name].resync(self.states)
        self.sim.trace.emit(
            self.sim.now,
            self.node_id,
            "split",
            0,
            double_sha256(f"split:{directive.new_depth}".encode()),
        )

    def _wallet_ops(self, ops: list[tuple], reverse: bool) -> None:
        by_script = self.wallet_by_script
        if not by_script:
            return
        views = self.sim.wallet_views
        for op in ops:
            if op[0] == "add":
                _, sid, outpoint = op
                if reverse:
                    for w in self.wallets:
                        views[w.name].forget(outpoint)
                else:
                    entry = self.states[sid].entries.get(outpoint)
                    if entry is None:
                        continue
                    w = by_script.get(entry.out.script_pubkey)
                    if w is not None:
                        views[w.name].learn(sid, outpoint, entry)
            else:
                _, sid, outpoint, entry = op
                w = by_script.get(entry.out.script_pubkey)
                if w is not None:
                    if reverse:
                        views[w.name].learn(sid, outpoint, entry)
                    else:
                        views[w.name].forget(outpoint)

    # -- mining ------------------------------------------------------------

    def schedule_mining(self) -> None:
        self.mine_epoch += 1
        mean = self.sim.mining_mean_ms(self)
        delay = det_exp_delay(self.time_rng, mean)
        self.sim.schedule(
            self.sim.now + delay, self.node_id, self._mine_fire, self.mine_epoch
        )

    def _mine_fire(self, epoch: int) -> None:
        if epoch != self.mine_epoch:
            return  # tip moved; a fresh attempt is already scheduled
        cb = chain.mine_composite(
            self.mempools,
            self.params,
            self.payout.script if self.payout else ledger.P2pkhScript(b"\x00" * 20),
            self.mine_rng,
            self.tips,
            timestamp=self.sim.now,
            eigenpool=self.eigenpool,
        )
        self.sim.trace.emit(self.sim.now, self.node_id, "mine", 0, cb.hash())
        self.handle_block(cb, origin=None)

    # -- local submission ---------------------------------------------------

    def submit_tx(self, tx: Transaction, subchain: int) -> bool:
        local = subchain if self.role != ROLE_HALF else self.tracked
        pool = self.mempools.get(local) if local is not None else None
        state = self.states.get(local) if local is not None else None
        if pool is None or state is None:
            return False
        try:
            pool.accept(state, tx, self.tips.height + 1, list(self.states.values()))
        except ledger.TxValidationError:
            self.stats.txs_rejected += 1
            return False
        self.seen.add(tx.txid)
        self.gossip(Message.tx(tx, subchain))
        return True

    def submit_eigentx(self, etx: Eigentransaction) -> bool:
        if self.eigenpool is not None:
            try:
                self.eigenpool.accept(
                    etx, self.states, self.tips.height + 1, self.params.eigentx_window
                )
            except Exception:
                self.stats.txs_rejected += 1
                return False
        self.seen.add(etx.etxid)
        self.gossip(Message.eigentx(etx))
        return True


class _WalletView:
    """A wallet's live outputs as seen from its home node, kept incrementally.

    `free` is a candidate list for O(1) random coin picks; entries go stale
    when coins are spent or committed and are dropped lazily on pick, with a
    full rebuild when the list runs dry.
    """

    def __init__(self, wallet: Wallet):
        self.wallet = wallet
        self.live: dict[OutPoint, tuple[int, ledger.UtxoEntry]] = {}
        self.committed: dict[OutPoint, int] = {}  # outpoint -> retry height
        self.free: list[OutPoint] = []

    def learn(self, sid: int, op: OutPoint, entry: ledger.UtxoEntry) -> None:
        self.live[op] = (sid, entry)
        self.free.append(op)

    def forget(self, op: OutPoint) -> None:
        self.live.pop(op, None)
        self.committed.pop(op, None)

    def resync(self, states: dict[int, ChainState]) -> None:
        """Rebuild after a split renumbers sub-chains."""
        self.live = {}
        for sid in sorted(states):
            for op, entry in states[sid].entries.items():
                if entry.out.script_pubkey == self.wallet.script:
                    self.live[op] = (sid, entry)
        self.free = list(self.live)

    def _rebuild_free(self, height: int) -> None:
        self.free = [
            op
            for op, (sid, entry) in self.live.items()
            if not (op in self.committed and self.committed[op] > height)
        ]

    def pick(self, rng: random.Random, height: int, usable) -> Optional[
        tuple[int, OutPoint, ledger.UtxoEntry]
    ]:
        """Draw a random usable coin; None if none can be found right now."""
        for attempt in range(2):
            tries = 8
            while self.free and tries > 0:
                idx = rng.randrange(len(self.free))
                op = self.free[idx]
                found = self.live.get(op)
                if found is None:
                    # stale: spent or forgotten; drop by swap-pop
                    self.free[idx] = self.free[-1]
                    self.free.pop()
                    continue
                sid, entry = found
                if op in self.committed and self.committed[op] > height:
                    self.free[idx] = self.free[-1]
                    self.free.pop()
                    continue
                if entry.coinbase and height - entry.height < ledger.COINBASE_MATURITY:
                    tries -= 1
                    continue
                if not usable(sid, op, entry):
                    tries -= 1
                    continue
                self.free[idx] = self.free[-1]
                self.free.pop()
                return sid, op, entry
            if attempt == 0 and not self.free:
                self._rebuild_free(height)
            else:
                break
        return None

    def spendable(self, height: int) -> list[tuple[int, OutPoint, ledger.UtxoEntry]]:
        out = []
        for op, (sid, entry) in self.live.items():
            if op in self.committed and self.committed[op] > height:
                continue
            if entry.coinbase and height - entry.height < ledger.COINBASE_MATURITY:
                continue
            out.append((sid, op, entry))
        return out

    def commit(self, ops: list[OutPoint], height: int) -> None:
        for op in ops:
            self.committed[op] = height + _COMMIT_TTL


@dataclass
class _HtlcRun:
    action: PayAction
    payment: Optional[HtlcPayment] = None
    submitted: bool = False
    claims_sent: bool = False
    refunded: set[int] = field(default_factory=set)
    claimed_legs: set[int] = field(default_factory=set)


@dataclass
class SimReport:
    trace_digest: Digest256
    duration_ms: int
    events: int
    tip_height: int
    node_stats: dict[str, NodeStats]
    confirmed: dict[tuple[int, int], int]  # (height, subchain) -> tx count
    miner_fees: dict[str, int]
    miner_subsidy: dict[str, int]
    exports: dict[int, bytes]
    export_digest: Digest256
    canonical: list[CompositeBlock]
    issued_total: int
    final_params: ConsensusParams
    trace_lines: list[str]

    @property
    def trace_digest_hex(self) -> str:
        return self.trace_digest.hex()


class Simulation:
    def __init__(self, config: SimConfig, trace_sink=None, keep_trace: bool = False):
        problems = config.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        self.config = config
        self.now = 0
        self._seq = 0
        self._queue: list[tuple[int, str, int, Callable, tuple]] = []
        self.trace = _Trace(trace_sink, keep_trace)
        self.rng_demand = random.Random(f"{config.seed}:demand")

        self.neighbors: dict[str, list[str]] = {n.node_id: [] for n in config.nodes}
        self._links: dict[tuple[str, str], LinkSpec] = {}
        for link in config.links:
            self.neighbors[link.a].append(link.b)
            self.neighbors[link.b].append(link.a)
            self._links[(link.a, link.b)] = link
            self._links[(link.b, link.a)] = link
        for k in self.neighbors:
            self.neighbors[k].sort()

        # Wallets, genesis funding, and the genesis composite.
        self.wallets: dict[str, Wallet] = {}
        self.wallet_views: dict[str, _WalletView] = {}
        self.wallet_home: dict[str, str] = {}
        funding: list[TxOut] = []
        default_home = next(
            (n.node_id for n in config.nodes if n.role == ROLE_FULL),
            config.nodes[0].node_id if config.nodes else "",
        )
        for spec in config.wallets:
            wallet = Wallet(
                spec.name,
                seed=spec.seed
                if spec.seed is not None
                else f"{config.seed}:wallet:{spec.name}".encode(),
            )
            self.wallets[spec.name] = wallet
            self.wallet_views[spec.name] = _WalletView(wallet)
            self.wallet_home[spec.name] = spec.node or default_home
            per = spec.funds // spec.utxos
            extra = spec.funds - per * spec.utxos
            for i in range(spec.utxos):
                funding.append(TxOut(per + (extra if i == 0 else 0), wallet.script))
        self.genesis_funding = sum(o.value for o in funding)
        self.genesis = chain.make_genesis(funding, config.params, str(config.seed))
        self.total_hashpower = sum(
            (n.hashpower for n in config.nodes if n.role == ROLE_MINER), Fraction(0)
        )

        self.nodes: dict[str, SimNode] = {}
        for spec in config.nodes:
            node = SimNode(spec, self)
            self.nodes[spec.node_id] = node
            if spec.role == ROLE_MINER:
                node.payout = Wallet(
                    f"miner:{spec.node_id}", seed=f"{config.seed}:payout:{spec.node_id}".encode()
                )
        self.miner_by_script: dict[bytes, str] = {
            node.payout.script.serialize(): node_id
            for node_id, node in self.nodes.items()
            if node.payout is not None
        }
        for name, home in self.wallet_home.items():
            wallet = self.wallets[name]
            self.nodes[home].wallets.append(wallet)
            self.nodes[home].wallet_by_script[wallet.script] = wallet
            self.wallet_views[name].resync(self.nodes[home].states)

        self.htlc_runs: list[_HtlcRun] = [_HtlcRun(p) for p in config.pays]
        self.pending_eigentx: list[EigentxAction] = list(config.eigentxs)
        self._wallet_names_cache = sorted(self.wallets)
        self.hash_to_wallet: dict[bytes, str] = {
            w.keypair.address_hash: name for name, w in self.wallets.items()
        }

    # -- infrastructure ------------------------------------------------------

    def schedule(self, at_ms: int, node_id: str, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at_ms, node_id, self._seq, fn, args))

    def link_up(self, a: str, b: str) -> bool:
        link = self._links[(a, b)]
        return self.now >= link.up_at_ms

    def link_latency(self, a: str, b: str) -> int:
        return self._links[(a, b)].latency_ms

    def deliver_later(self, sender: str, receiver: str, msg: Message) -> None:
        link = self._links[(sender, receiver)]
        self.schedule(
            self.now + link.latency_ms,
            receiver,
            self.nodes[receiver].on_message,
            sender,
            msg,
        )

    def mining_mean_ms(self, node: SimNode) -> int:
        # Difficulty scales linearly with the inverse target; the initial
        # targets calibrate to the configured interval.
        base = self.config.interval_ms
        init = self.config.params.eigen_target
        cur = node.params.eigen_target
        network_mean = base * init // cur
        share = node.spec.hashpower / self.total_hashpower
        return max(1, int(network_mean / share))

    # -- scripted actions ----------------------------------------------------

    def on_connect(self, node: SimNode, cb: CompositeBlock) -> None:
        height = cb.height
        for run in self.htlc_runs:
            self._drive_htlc(run, node, height)
        for action in list(self.pending_eigentx):
            home = self.wallet_home[action.wallet]
            if node.node_id == home and height >= action.at_height:
                self.pending_eigentx.remove(action)
                self._fire_eigentx(action, node, height)

    def _drive_htlc(self, run: _HtlcRun, node: SimNode, height: int) -> None:
        action = run.action
        sender_home = self.wallet_home[action.sender]
        receiver_home = self.wallet_home[action.receiver]
        sender = self.wallets[action.sender]
        receiver = self.wallets[action.receiver]

        if not run.submitted:
            if node.node_id != sender_home or height < action.at_height:
                return
            view = self.wallet_views[action.sender]
            states = {
                sid: node.states[sid] for sid in sorted(node.states)
            }
            committed = {
                op for op, until in view.committed.items() if until > height
            }
            try:
                run.payment = xfer.plan_htlc_payment(
                    sender,
                    states,
                    action.amount,
                    receiver.keypair.address_hash,
                    height,
                    random.Random(f"{self.config.seed}:htlc:{action.at_height}"),
                    fee_per_leg=action.fee,
                    exclude=committed,
                )
            except xfer.InsufficientTotalBalance:
                run.submitted = True  # nothing to do; drop the action
                return
            run.submitted = True
            for leg in run.payment.legs:
                node.submit_tx(leg.tx, leg.subchain)
                view.commit([i.prevout for i in leg.tx.inputs], height)
            return

        if run.payment is None:
            return

        if not run.claims_sent and node.node_id == receiver_home:
            # Claim once every leg output is visible on the receiver's node.
            located = []
            for leg in run.payment.legs:
                found = None
                for sid in sorted(node.states):
                    entry = node.states[sid].entries.get(leg.htlc_outpoint)
                    if entry is not None:
                        found = (sid, entry)
                        break
                if found is None:
                    break
                located.append((leg, found))
            else:
                run.claims_sent = True
                for leg, (sid, entry) in located:
                    tx = xfer.claim_htlc_leg(
                        leg.htlc_outpoint,
                        entry.out,
                        run.payment.preimage,
                        receiver.keypair,
                        height,
                        fee=min(action.fee, entry.value - 1),
                    )
                    node.submit_tx(tx, sid)

        if node.node_id == sender_home and not run.claims_sent:
            for i, leg in enumerate(run.payment.legs):
                if i in run.refunded or height < leg.timelock:
                    continue
                for sid in sorted(node.states):
                    entry = node.states[sid].entries.get(leg.htlc_outpoint)
                    if entry is not None:
                        tx = xfer.refund_htlc_leg(
                            leg.htlc_outpoint,
                            entry.out,
                            sender.keypair,
                            height,
                            fee=min(action.fee, entry.value - 1),
                        )
                        if node.submit_tx(tx, sid):
                            run.refunded.add(i)
                        break

    def _fire_eigentx(self, action: EigentxAction, node: SimNode, height: int) -> None:
        wallet = self.wallets[action.wallet]
        view = self.wallet_views[action.wallet]
        coins = [
            (op, entry)
            for sid, op, entry in view.spendable(height)
            if sid == action.source
        ]
        coins.sort(key=lambda t: (-t[1].value, t[0].txid, t[0].index))
        picked: list[OutPoint] = []
        total = 0
        for op, entry in coins:
            picked.append(op)
            total += entry.value
            if total >= action.amount + xfer.EIGENTX_FEE:
                break
        if total < action.amount + xfer.EIGENTX_FEE:
            return
        etx = Eigentransaction.create(
            wallet.keypair, action.amount, action.source, action.dest, picked
        )
        if node.submit_eigentx(etx):
            view.commit(picked, height)

    # -- demand --------------------------------------------------------------

    def _schedule_arrival(self, name: str) -> None:
        assert self.config.demand_mean_ms is not None
        delay = det_exp_delay(self.rng_demand, self.config.demand_mean_ms)
        self.schedule(self.now + delay, self.wallet_home[name], self._arrival, name)

    def _arrival(self, name: str) -> None:
        self._schedule_arrival(name)
        node = self.nodes[self.wallet_home[name]]
        view = self.wallet_views[name]
        wallet = self.wallets[name]
        height = node.tips.height + 1
        # Wallet-side backpressure: with the target pool already several
        # blocks deep, submitting more just grows the queue without bound.
        # Coins spent by a transaction still queued at the home node are not
        # retried either; replacement is out of scope.
        backlog_cap = 8 * node.params.block_tx_capacity
        if all(len(pool) >= backlog_cap for pool in node.mempools.values()):
            return

        def usable(sid: int, op: OutPoint, entry: ledger.UtxoEntry) -> bool:
            if entry.out.value <= 200:
                return False
            pool = node.mempools.get(sid)
            if pool is None or len(pool) >= backlog_cap:
                return False
            return op not in pool.by_outpoint

        picked = view.pick(self.rng_demand, height, usable)
        if picked is None:
            return
        sid, op, entry = picked
        others = self._wallet_names_cache
        if len(others) < 2:
            return
        dest_name = others[self.rng_demand.randrange(len(others))]
        if dest_name == name:
            dest_name = others[(others.index(dest_name) + 1) % len(others)]
        dest = self.wallets[dest_name]
        fee = self.rng_demand.randint(50, 150)
        amount = self.rng_demand.randint(1, entry.out.value - fee - 1)
        outputs = [TxOut(amount, dest.script)]
        change = entry.value - amount - fee
        if change > 0:
            outputs.append(TxOut(change, wallet.script))
        tx = Transaction([ledger.TxIn(op)], outputs)
        wallet.sign_inputs(tx)
        if node.submit_tx(tx, sid):
            view.commit([op], height)
        else:
            view.free.append(op)

    # -- run -----------------------------------------------------------------

    def run(self) -> SimReport:
        for node in self.nodes.values():
            if node.role == ROLE_MINER:
                node.schedule_mining()
        if self.config.demand_mean_ms is not None:
            for name in self.wallets:
                self._schedule_arrival(name)
        while self._queue:
            at, node_id, seq, fn, args = heapq.heappop(self._queue)
            if at > self.config.duration_ms:
                break
            self.now = at
            fn(*args)
        self.now = self.config.duration_ms
        report = self._report()
        self._final_audit(report)
        return report

    # -- reporting -----------------------------------------------------------

    def observer(self) -> SimNode:
        for node in self.nodes.values():
            if node.role == ROLE_FULL:
                return node
        for node in self.nodes.values():
            if node.role == ROLE_MINER:
                return node
        raise ConfigError("no full node or miner to observe")

    def _report(self) -> SimReport:
        obs = self.observer()
        canonical: list[CompositeBlock] = []
        entry = obs.index.entries[obs.tips.eigen]
        while entry is not None:
            canonical.append(entry.cb)
            entry = entry.parent
        canonical.reverse()

        confirmed: dict[tuple[int, int], int] = {}
        miner_fees: dict[str, int] = {}
        miner_subsidy: dict[str, int] = {}
        for cb in canonical[1:]:
            for sb in cb.subblocks:
                confirmed[(cb.height, sb.subchain)] = len(sb.txs) - 1
            payout = cb.eigen.reward.payout_script.serialize()
            miner = self.miner_by_script.get(payout, payout[:8].hex())
            fees = sum(
                sum(o.value for o in sb.txs[0].outputs) for sb in cb.subblocks
            )
            fees += xfer.EIGENTX_FEE * len(cb.eigen.eigentxs)
            subsidy = obs.params.subsidy(cb.height)
            miner_fees[miner] = miner_fees.get(miner, 0) + fees
            miner_subsidy[miner] = miner_subsidy.get(miner, 0) + subsidy

        exports: dict[int, bytes] = {}
        for sid in sorted(obs.states):
            exports[sid] = ledger.export_chainstate(
                obs.states[sid], obs.tips.height, obs.issued
            )
        export_digest = double_sha256(b"".join(exports[s] for s in sorted(exports)))

        return SimReport(
            trace_digest=self.trace.digest(),
            duration_ms=self.config.duration_ms,
            events=self.trace.events,
            tip_height=obs.tips.height,
            node_stats={nid: self.nodes[nid].stats for nid in sorted(self.nodes)},
            confirmed=confirmed,
            miner_fees=miner_fees,
            miner_subsidy=miner_subsidy,
            exports=exports,
            export_digest=export_digest,
            canonical=canonical,
            issued_total=obs.issued,
            final_params=obs.params,
            trace_lines=self.trace.lines(),
        )

    def _final_audit(self, report: SimReport) -> None:
        """Partition and conservation invariants on every node."""
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            for state in node.states.values():
                ledger.audit_partition(state)
            if node.role != ROLE_HALF:
                total = sum(s.total_value() for s in node.states.values())
                if total != node.issued:
                    raise ledger.AuditError(
                        f"{node_id}: holds {total}, issued {node.issued}"
                    )
                if sorted(node.states) != list(range(node.params.n_subchains)):
                    raise ledger.AuditError(f"{node_id}: missing chainstates")


def run_simulation(
    config: SimConfig, trace_sink=None, keep_trace: bool = False
) -> SimReport:
    return Simulation(config, trace_sink, keep_trace).run()


def replay_chain(config: SimConfig, canonical: list[CompositeBlock]) -> Digest256:
    """Reconnect a recorded composite sequence on a fresh node and return the
    resulting chainstate export digest."""
    sim = Simulation(config)  # only used to rebuild genesis deterministically
    params = config.params.copy()
    states = {0: ChainState.genesis()}
    chain.connect_composite(states, sim.genesis, params)
    genesis = sim.genesis
    if canonical and canonical[0].hash() != genesis.hash():
        raise ValueError("recorded chain does not start at this genesis")
    tips = Tips(0, genesis.hash(), {0: genesis.subblocks[0].hash()})
    issued = sim.genesis_funding
    pending = list(config.splits)
    index_timestamps = [genesis.eigen.header.timestamp]
    for cb in canonical[1:]:
        chain.validate_composite(cb, tips, params, states)
        chain.connect_composite(states, cb, params)
        issued += params.subsidy(cb.height)
        tips = Tips(cb.height, cb.hash(), {sb.subchain: sb.hash() for sb in cb.subblocks})
        index_timestamps.append(cb.eigen.header.timestamp)
        if cb.height > 0 and cb.height % _RETARGET_WINDOW == 0:
            intervals = [
                index_timestamps[-i] - index_timestamps[-i - 1]
                for i in range(1, _RETARGET_WINDOW + 1)
            ]
            params = chain.retarget(params, intervals, config.interval_ms)
        for directive in list(pending):
            if directive.activation_height == cb.height:
                pools = {sid: Mempool(sid) for sid in states}
                states, _, params, _ = splitter.apply_split(
                    states, pools, params, directive, cb.height
                )
                new_tips = {}
                for old, h in tips.subchains.items():
                    new_tips[2 * old] = h
                    new_tips[2 * old + 1] = h
                tips = Tips(tips.height, tips.eigen, new_tips)
                pending.remove(directive)
    exports = {
        sid: ledger.export_chainstate(states[sid], tips.height, issued)
        for sid in sorted(states)
    }
    return double_sha256(b"".join(exports[s] for s in sorted(exports)))
