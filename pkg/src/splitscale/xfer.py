"""Cross-sub-chain value movement.

Two mechanisms: multi-leg HTLC payments, a wallet-level protocol where every
leg shares one hashlock so the whole payment settles or refunds as a unit,
and eigentransactions, a consensus-level transfer of one address's funds
between sub-chains, mined into the coordinating chain from a global pool.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import crypto, ledger
from .crypto import Digest256, double_sha256
from .encoding import Reader, ser_bytes, ser_u16, ser_u32, ser_u64
from .ledger import (
    ChainState,
    HtlcScript,
    OutPoint,
    P2pkhScript,
    Transaction,
    TxIn,
    TxOut,
    UtxoEntry,
    Witness,
)

__all__ = [
    "EIGENTX_FEE",
    "EIGENTX_CAP",
    "HTLC_STAGGER",
    "InsufficientTotalBalance",
    "WrongPreimage",
    "TimelockNotExpired",
    "WindowClosed",
    "AddressMismatch",
    "SameSubchain",
    "BadSignature",
    "Wallet",
    "HtlcLeg",
    "HtlcPayment",
    "plan_htlc_payment",
    "claim_htlc_leg",
    "refund_htlc_leg",
    "Eigentransaction",
    "Eigenpool",
    "validate_eigentx",
    "apply_eigentx",
    "read_eigentx",
]

# Flat fee per eigentransaction, paid into the eigen block's reward record.
EIGENTX_FEE = 100
# Eigentransactions admitted per eigen block.
EIGENTX_CAP = 50
# Blocks between consecutive HTLC leg timelocks.
HTLC_STAGGER = 10


class InsufficientTotalBalance(Exception):
    pass


class WrongPreimage(Exception):
    pass


class TimelockNotExpired(Exception):
    pass


class WindowClosed(Exception):
    pass


class AddressMismatch(Exception):
    pass


class SameSubchain(Exception):
    pass


class BadSignature(Exception):
    pass


class Wallet:
    """A named keypair plus helpers to find and spend its outputs."""

    def __init__(self, name: str, seed: Optional[bytes] = None):
        self.name = name
        self.keypair = crypto.keygen(seed if seed is not None else name.encode())
        self.script = P2pkhScript(self.keypair.address_hash)
        self.script_hash = ledger.script_hash(self.script)

    def __repr__(self) -> str:
        return f"Wallet({self.name})"

    def owned(self, state: ChainState) -> list[tuple[OutPoint, UtxoEntry]]:
        return [
            (op, e)
            for op, e in state.entries.items()
            if e.out.script_pubkey == self.script
        ]

    def spendable(
        self,
        states: dict[int, ChainState],
        height: int,
        exclude: Optional[set[OutPoint]] = None,
    ) -> dict[int, list[tuple[OutPoint, UtxoEntry]]]:
        """Mature outputs per sub-chain, minus any the caller has committed."""
        out: dict[int, list[tuple[OutPoint, UtxoEntry]]] = {}
        for sid in sorted(states):
            found = []
            for op, e in self.owned(states[sid]):
                if exclude and op in exclude:
                    continue
                if e.coinbase and height - e.height < ledger.COINBASE_MATURITY:
                    continue
                found.append((op, e))
            if found:
                found.sort(key=lambda t: (-t[1].value, t[0].txid, t[0].index))
                out[sid] = found
        return out

    def balance(self, states: dict[int, ChainState], height: Optional[int] = None) -> int:
        total = 0
        for state in states.values():
            for _, e in self.owned(state):
                if (
                    height is not None
                    and e.coinbase
                    and height - e.height < ledger.COINBASE_MATURITY
                ):
                    continue
                total += e.value
        return total

    def sign_inputs(self, tx: Transaction) -> None:
        """Fill every input's witness with this wallet's P2PKH claim."""
        digest = tx.sighash()
        sig = crypto.sign(self.keypair.secret, digest)
        for i, txin in enumerate(tx.inputs):
            tx.inputs[i] = TxIn(
                txin.prevout,
                Witness(signature=sig, pubkey=self.keypair.public),
                txin.sequence,
            )
        tx._ser = None
        tx._txid = None

    def build_payment(
        self,
        coins: list[tuple[OutPoint, UtxoEntry]],
        dest_script: ledger.Script,
        amount: int,
        fee: int = 0,
    ) -> Transaction:
        """Spend own coins (largest first) paying `amount` plus change."""
        picked = []
        total = 0
        for op, e in coins:
            picked.append((op, e))
            total += e.value
            if total >= amount + fee:
                break
        if total < amount + fee:
            raise InsufficientTotalBalance(
                f"{self.name} holds {total}, needs {amount + fee}"
            )
        outputs = [TxOut(amount, dest_script)]
        change = total - amount - fee
        if change > 0:
            outputs.append(TxOut(change, self.script))
        tx = Transaction([TxIn(op) for op, _ in picked], outputs)
        self.sign_inputs(tx)
        return tx


@dataclass
class HtlcLeg:
    subchain: int
    tx: Transaction
    amount: int
    timelock: int

    @property
    def htlc_outpoint(self) -> OutPoint:
        return OutPoint(self.tx.txid, 0)

    @property
    def htlc_out(self) -> TxOut:
        return self.tx.outputs[0]


@dataclass
class HtlcPayment:
    preimage: bytes
    hashlock: Digest256
    legs: list[HtlcLeg]
    timelock_base: int
    stagger: int
    amount: int

    @property
    def max_timelock(self) -> int:
        return max(leg.timelock for leg in self.legs)

    @property
    def earliest_timelock(self) -> int:
        return min(leg.timelock for leg in self.legs)


def plan_htlc_payment(
    wallet: Wallet,
    states: dict[int, ChainState],
    amount: int,
    receiver: bytes,
    height: int,
    rng: random.Random,
    timelock_base: Optional[int] = None,
    stagger: int = HTLC_STAGGER,
    fee_per_leg: int = 0,
    exclude: Optional[set[OutPoint]] = None,
) -> HtlcPayment:
    """Split a payment across sub-chains under one shared hashlock.

    Allocation is greedy, largest per-sub-chain balance first; leg i gets
    timelock timelock_base + i * stagger.
    """
    if timelock_base is None:
        timelock_base = height + 2 * stagger
    preimage = rng.randbytes(32)
    hashlock = double_sha256(preimage)
    spendable = wallet.spendable(states, height, exclude)
    balances = {
        sid: sum(e.value for _, e in coins) for sid, coins in spendable.items()
    }
    total = sum(max(0, b - fee_per_leg) for b in balances.values())
    if total < amount:
        raise InsufficientTotalBalance(f"spendable {total} < amount {amount}")
    order = sorted(balances, key=lambda sid: (-balances[sid], sid))
    legs: list[HtlcLeg] = []
    remaining = amount
    for sid in order:
        if remaining == 0:
            break
        available = balances[sid] - fee_per_leg
        if available <= 0:
            continue
        part = min(available, remaining)
        timelock = timelock_base + len(legs) * stagger
        script = HtlcScript(
            hashlock=hashlock,
            timelock=timelock,
            receiver=receiver,
            sender=wallet.keypair.address_hash,
        )
        tx = wallet.build_payment(spendable[sid], script, part, fee_per_leg)
        legs.append(HtlcLeg(subchain=sid, tx=tx, amount=part, timelock=timelock))
        remaining -= part
    return HtlcPayment(
        preimage=preimage,
        hashlock=hashlock,
        legs=legs,
        timelock_base=timelock_base,
        stagger=stagger,
        amount=amount,
    )


def _spend_htlc(
    outpoint: OutPoint,
    out: TxOut,
    keypair: crypto.KeyPair,
    dest: bytes,
    preimage: Optional[bytes],
    refund: bool,
    fee: int,
) -> Transaction:
    script = out.script_pubkey
    assert isinstance(script, HtlcScript)
    tx = Transaction(
        [TxIn(outpoint)],
        [TxOut(out.value - fee, P2pkhScript(dest))],
    )
    sig = crypto.sign(keypair.secret, tx.sighash())
    tx.inputs[0] = TxIn(
        outpoint,
        Witness(signature=sig, pubkey=keypair.public, preimage=preimage, refund=refund),
    )
    tx._ser = None
    tx._txid = None
    return tx


def claim_htlc_leg(
    outpoint: OutPoint,
    out: TxOut,
    preimage: bytes,
    receiver_keypair: crypto.KeyPair,
    height: int,
    fee: int = 0,
) -> Transaction:
    """Receiver spend of one leg via the hashlock branch."""
    script = out.script_pubkey
    if not isinstance(script, HtlcScript):
        raise ValueError("not an HTLC output")
    if double_sha256(preimage) != script.hashlock:
        raise WrongPreimage("preimage does not match hashlock")
    return _spend_htlc(
        outpoint, out, receiver_keypair, script.receiver, preimage, False, fee
    )


def refund_htlc_leg(
    outpoint: OutPoint,
    out: TxOut,
    sender_keypair: crypto.KeyPair,
    height: int,
    fee: int = 0,
) -> Transaction:
    """Sender spend of one leg via the timelock branch, valid from the
    timelock height onward."""
    script = out.script_pubkey
    if not isinstance(script, HtlcScript):
        raise ValueError("not an HTLC output")
    if height < script.timelock:
        raise TimelockNotExpired(
            f"height {height} before timelock {script.timelock}"
        )
    return _spend_htlc(outpoint, out, sender_keypair, script.sender, None, True, fee)


@dataclass(eq=False)
class Eigentransaction:
    """Transfer of one address's funds from one sub-chain to another.

    The sending and claiming script are the same P2PKH script; only its
    hosting sub-chain changes.
    """

    owner_script: P2pkhScript
    owner_pubkey: bytes
    amount: int
    source: int
    dest: int
    source_outpoints: list[OutPoint]
    signature: bytes = b""

    _etxid: Optional[Digest256] = field(default=None, repr=False)

    def serialize(self, with_signature: bool = True) -> bytes:
        out = bytearray()
        out += ser_bytes(self.owner_script.serialize())
        out += ser_bytes(self.owner_pubkey)
        out += ser_u64(self.amount)
        out += ser_u16(self.source)
        out += ser_u16(self.dest)
        out += ser_u32(len(self.source_outpoints))
        for op in self.source_outpoints:
            out += op.serialize()
        out += ser_bytes(self.signature if with_signature else b"")
        return bytes(out)

    def sighash(self) -> Digest256:
        return double_sha256(self.serialize(with_signature=False))

    @property
    def etxid(self) -> Digest256:
        if self._etxid is None:
            self._etxid = double_sha256(self.serialize())
        return self._etxid

    @classmethod
    def create(
        cls,
        keypair: crypto.KeyPair,
        amount: int,
        source: int,
        dest: int,
        source_outpoints: list[OutPoint],
    ) -> "Eigentransaction":
        etx = cls(
            owner_script=P2pkhScript(keypair.address_hash),
            owner_pubkey=keypair.public,
            amount=amount,
            source=source,
            dest=dest,
            source_outpoints=list(source_outpoints),
        )
        etx.signature = crypto.sign(keypair.secret, etx.sighash())
        return etx


def read_eigentx(r: Reader) -> Eigentransaction:
    script = ledger.script_from_bytes(r.bytes_())
    if not isinstance(script, P2pkhScript):
        raise ledger.DecodeError("eigentransaction owner script must be P2PKH")
    pubkey = r.bytes_()
    amount = r.u64()
    source = r.u16()
    dest = r.u16()
    outpoints = [OutPoint(r.take(32), r.u32()) for _ in range(r.u32())]
    signature = r.bytes_()
    return Eigentransaction(script, pubkey, amount, source, dest, outpoints, signature)


def validate_eigentx(
    etx: Eigentransaction,
    states: dict[int, ChainState],
    height: int,
    window: Optional[tuple[int, int]] = None,
) -> int:
    """Check an eigentransaction against current states; returns its fee."""
    if window is not None and not (window[0] <= height <= window[1]):
        raise WindowClosed(f"height {height} outside window {window}")
    if not isinstance(etx.owner_script, P2pkhScript):
        raise AddressMismatch("owner script must be P2PKH")
    if etx.source == etx.dest:
        raise SameSubchain(f"source and dest are both {etx.source}")
    if etx.source not in states or etx.dest not in states:
        raise ValueError(f"unknown sub-chain in {etx.source}->{etx.dest}")
    if crypto.address_hash(etx.owner_pubkey) != etx.owner_script.address_hash:
        raise BadSignature("pubkey does not match owner script")
    if not crypto.verify(etx.owner_pubkey, etx.sighash(), etx.signature):
        raise BadSignature("signature verification failed")
    if etx.amount <= 0:
        raise ledger.ValueOverspend("amount must be positive")
    source_state = states[etx.source]
    total = 0
    seen: set[OutPoint] = set()
    for op in etx.source_outpoints:
        if op in seen:
            raise ledger.DoubleSpendInBlock(f"duplicate source outpoint {op.hex()}")
        seen.add(op)
        entry = source_state.get(op)
        if entry is None:
            raise ledger.MissingUtxo(f"source outpoint {op.hex()} not found")
        if entry.out.script_pubkey != etx.owner_script:
            raise AddressMismatch(
                f"source outpoint {op.hex()} is not owned by the claiming script"
            )
        if entry.coinbase and height - entry.height < ledger.COINBASE_MATURITY:
            raise ledger.ImmatureLocktime(f"source {op.hex()} is immature coinbase")
        total += entry.value
    if total < etx.amount + EIGENTX_FEE:
        raise ledger.ValueOverspend(
            f"sources {total} below amount {etx.amount} plus fee {EIGENTX_FEE}"
        )
    return EIGENTX_FEE


def apply_eigentx(
    states: dict[int, ChainState], etx: Eigentransaction, height: int
) -> list[tuple]:
    """Move the funds; returns reversible state ops (see ledger.revert_ops).

    The destination output is pinned when the owner's script hash does not
    route to the destination sub-chain, exempting it from the partition
    audit. Change stays on the source sub-chain under the same rule.
    """
    ops: list[tuple] = []
    source_state = states[etx.source]
    dest_state = states[etx.dest]
    total = 0
    for op in etx.source_outpoints:
        entry = source_state.entries.pop(op, None)
        if entry is None:
            ledger.revert_ops(states, ops)
            raise ValueError(f"apply of non-validated eigentx: missing {op.hex()}")
        ops.append(("del", etx.source, op, entry))
        total += entry.value
    h = ledger.script_hash(etx.owner_script)
    dest_op = OutPoint(etx.etxid, 0)
    dest_entry = UtxoEntry(
        TxOut(etx.amount, etx.owner_script),
        height,
        pinned=not dest_state.owns(h),
    )
    dest_state.entries[dest_op] = dest_entry
    ops.append(("add", etx.dest, dest_op))
    change = total - etx.amount - EIGENTX_FEE
    if change > 0:
        change_op = OutPoint(etx.etxid, 1)
        source_state.entries[change_op] = UtxoEntry(
            TxOut(change, etx.owner_script),
            height,
            pinned=not source_state.owns(h),
        )
        ops.append(("add", etx.source, change_op))
    return ops


class Eigenpool:
    """Global pending set for eigentransactions."""

    def __init__(self) -> None:
        self.pending: dict[Digest256, Eigentransaction] = {}
        self.by_outpoint: dict[OutPoint, Digest256] = {}

    def __len__(self) -> int:
        return len(self.pending)

    def __contains__(self, etxid: Digest256) -> bool:
        return etxid in self.pending

    def accept(
        self,
        etx: Eigentransaction,
        states: dict[int, ChainState],
        height: int,
        window: Optional[tuple[int, int]] = None,
    ) -> int:
        if etx.etxid in self.pending:
            raise ledger.ConflictingSpend("eigentransaction already pending")
        fee = validate_eigentx(etx, states, height, window)
        for op in etx.source_outpoints:
            other = self.by_outpoint.get(op)
            if other is not None:
                raise ledger.ConflictingSpend(
                    f"source outpoint {op.hex()} already claimed by {other.hex()}"
                )
        self.pending[etx.etxid] = etx
        for op in etx.source_outpoints:
            self.by_outpoint[op] = etx.etxid
        return fee

    def drop(self, etxid: Digest256) -> Optional[Eigentransaction]:
        etx = self.pending.pop(etxid, None)
        if etx is None:
            return None
        for op in etx.source_outpoints:
            self.by_outpoint.pop(op, None)
        return etx

    def remove_spent(self, outpoints: Iterable[OutPoint]) -> list[Eigentransaction]:
        dropped = []
        for op in outpoints:
            etxid = self.by_outpoint.get(op)
            if etxid is not None:
                etx = self.drop(etxid)
                if etx is not None:
                    dropped.append(etx)
        return dropped

    def select(self, capacity: int = EIGENTX_CAP) -> list[Eigentransaction]:
        """Deterministic selection: flat fees make this ascending-id order."""
        order = sorted(self.pending.values(), key=lambda e: e.etxid)
        return order[:capacity]
