"""UTXO transaction model, script subset, chainstates, and mempools.

Transactions follow the per-output model: a chainstate maps outpoints to
individual unspent outputs. Each chainstate owns a half-open interval of the
script-hash space and stores only entries whose script hash falls inside it,
except for entries explicitly pinned by cross-chain transfers. Transactions
whose inputs resolve to more than one sub-chain are rejected outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Union

from . import crypto
from .crypto import Digest256, double_sha256, hash_utxo
from .encoding import DecodeError, Reader, ser_bytes, ser_u8, ser_u16, ser_u32, ser_u64

__all__ = [
    "MAX_MONEY",
    "COINBASE_MATURITY",
    "HASH_SPACE",
    "OutPoint",
    "TxOut",
    "TxIn",
    "Witness",
    "P2pkhScript",
    "HtlcScript",
    "Script",
    "Transaction",
    "UtxoEntry",
    "ChainState",
    "Mempool",
    "UndoRecord",
    "TxValidationError",
    "MissingUtxo",
    "MixedSubchains",
    "ScriptFailure",
    "ValueOverspend",
    "ImmatureLocktime",
    "DoubleSpendInBlock",
    "ConflictingSpend",
    "AuditError",
    "script_from_bytes",
    "script_hash",
    "eval_script",
    "sighash",
    "serialize_tx",
    "deserialize_tx",
    "txid",
    "validate_transaction",
    "apply_transaction",
    "revert_transaction",
    "make_coinbase",
    "export_chainstate",
    "import_chainstate",
    "revert_ops",
    "audit_partition",
]

MAX_MONEY = 21_000_000 * 10**8
COINBASE_MATURITY = 10

# Script hashes live in [0, 2**256); chainstate intervals partition it.
HASH_SPACE = 1 << 256

_ZERO32 = b"\x00" * 32
_COINBASE_INDEX = 0xFFFFFFFF

# Opcode bytes used by the canonical script serializations.
_OP_DUP = 0x76
_OP_HASH160 = 0xA9
_OP_EQUALVERIFY = 0x88
_OP_CHECKSIG = 0xAC
_OP_IF = 0x63
_OP_ELSE = 0x67
_OP_ENDIF = 0x68
_OP_HASH256 = 0xAA
_OP_CLTV = 0xB1
_OP_DROP = 0x75
_PUSH4 = 0x04
_PUSH20 = 0x14
_PUSH32 = 0x20

_P2PKH_LEN = 25
_HTLC_LEN = 93


class TxValidationError(Exception):
    """Base class for transaction rejection reasons."""


class MissingUtxo(TxValidationError):
    pass


class MixedSubchains(TxValidationError):
    pass


class ScriptFailure(TxValidationError):
    pass


class ValueOverspend(TxValidationError):
    pass


class ImmatureLocktime(TxValidationError):
    pass


class DoubleSpendInBlock(TxValidationError):
    pass


class ConflictingSpend(TxValidationError):
    pass


class AuditError(Exception):
    """A full-scan audit found a broken invariant."""


class OutPoint(NamedTuple):
    # NamedTuple rather than a dataclass: outpoints are dict keys on every
    # hot path and tuple hashing is native.
    txid: Digest256
    index: int

    def serialize(self) -> bytes:
        return self.txid + ser_u32(self.index)

    def hex(self) -> str:
        return f"{self.txid.hex()}:{self.index}"


@dataclass(frozen=True)
class P2pkhScript:
    """Standard pay-to-pubkey-hash locking script."""

    address_hash: bytes

    def serialize(self) -> bytes:
        return bytes([_OP_DUP, _OP_HASH160, _PUSH20]) + self.address_hash + bytes(
            [_OP_EQUALVERIFY, _OP_CHECKSIG]
        )


@dataclass(frozen=True)
class HtlcScript:
    """Hashlock-or-timelock script.

    Claim branch: receiver proves knowledge of the hashlock preimage.
    Refund branch: sender recovers the funds once the timelock height is
    reached (inclusive boundary).
    """

    hashlock: Digest256
    timelock: int
    receiver: bytes
    sender: bytes

    def serialize(self) -> bytes:
        return (
            bytes([_OP_IF, _OP_HASH256, _PUSH32])
            + self.hashlock
            + bytes([_OP_EQUALVERIFY, _OP_DUP, _OP_HASH160, _PUSH20])
            + self.receiver
            + bytes([_OP_ELSE, _PUSH4])
            + self.timelock.to_bytes(4, "little")
            + bytes([_OP_CLTV, _OP_DROP, _OP_DUP, _OP_HASH160, _PUSH20])
            + self.sender
            + bytes([_OP_ENDIF, _OP_EQUALVERIFY, _OP_CHECKSIG])
        )


Script = Union[P2pkhScript, HtlcScript]


def script_from_bytes(data: bytes) -> Script:
    """Parse a canonical script serialization back into its typed form."""
    if len(data) == _P2PKH_LEN:
        if (
            data[0] == _OP_DUP
            and data[1] == _OP_HASH160
            and data[2] == _PUSH20
            and data[23] == _OP_EQUALVERIFY
            and data[24] == _OP_CHECKSIG
        ):
            return P2pkhScript(address_hash=data[3:23])
        raise DecodeError("malformed P2PKH script")
    if len(data) == _HTLC_LEN:
        if (
            data[0] == _OP_IF
            and data[1] == _OP_HASH256
            and data[2] == _PUSH32
            and data[35] == _OP_EQUALVERIFY
            and data[36] == _OP_DUP
            and data[37] == _OP_HASH160
            and data[38] == _PUSH20
            and data[59] == _OP_ELSE
            and data[60] == _PUSH4
            and data[65] == _OP_CLTV
            and data[66] == _OP_DROP
            and data[67] == _OP_DUP
            and data[68] == _OP_HASH160
            and data[69] == _PUSH20
            and data[90] == _OP_ENDIF
            and data[91] == _OP_EQUALVERIFY
            and data[92] == _OP_CHECKSIG
        ):
            return HtlcScript(
                hashlock=data[3:35],
                timelock=int.from_bytes(data[61:65], "little"),
                receiver=data[39:59],
                sender=data[70:90],
            )
        raise DecodeError("malformed HTLC script")
    raise DecodeError(f"unknown script length {len(data)}")


# Scripts repeat heavily (one per wallet address); their hashes drive every
# routing decision, so memoize them.
_SCRIPT_HASH_CACHE: dict[Script, Digest256] = {}


def script_hash(script: Script) -> Digest256:
    h = _SCRIPT_HASH_CACHE.get(script)
    if h is None:
        h = hash_utxo(script.serialize())
        if len(_SCRIPT_HASH_CACHE) > 1 << 20:
            _SCRIPT_HASH_CACHE.clear()
        _SCRIPT_HASH_CACHE[script] = h
    return h


@dataclass(frozen=True)
class TxOut:
    value: int
    script_pubkey: Script

    def __post_init__(self):
        if not 0 <= self.value <= MAX_MONEY:
            raise ValueError(f"output value {self.value} out of range")

    def serialize(self) -> bytes:
        return ser_u64(self.value) + ser_bytes(self.script_pubkey.serialize())


_EMPTY = b""


@dataclass(frozen=True)
class Witness:
    """Claim data for spending an output.

    For P2PKH spends only signature and pubkey are set. HTLC spends add the
    preimage (claim branch) or set the refund flag (refund branch).
    """

    signature: bytes = _EMPTY
    pubkey: bytes = _EMPTY
    preimage: Optional[bytes] = None
    refund: bool = False

    def serialize(self) -> bytes:
        return (
            ser_bytes(self.signature)
            + ser_bytes(self.pubkey)
            + ser_bytes(self.preimage if self.preimage is not None else _EMPTY)
            + ser_u8(1 if self.refund else 0)
        )


_BLANK_WITNESS_BYTES = Witness().serialize()


@dataclass(frozen=True)
class TxIn:
    prevout: OutPoint
    witness: Witness = Witness()
    sequence: int = 0xFFFFFFFF

    def serialize(self, with_witness: bool = True) -> bytes:
        w = self.witness.serialize() if with_witness else _BLANK_WITNESS_BYTES
        return self.prevout.serialize() + w + ser_u32(self.sequence)


@dataclass(eq=False)
class Transaction:
    inputs: list[TxIn]
    outputs: list[TxOut]
    locktime: int = 0
    is_coinbase: bool = False

    # Instances are treated as immutable once built; derived bytes are cached.
    _ser: Optional[bytes] = field(default=None, repr=False, compare=False)
    _txid: Optional[Digest256] = field(default=None, repr=False, compare=False)
    _sighash: Optional[Digest256] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.is_coinbase and (not self.inputs or not self.outputs):
            raise ValueError("non-coinbase needs at least one input and one output")

    def serialize(self, with_witness: bool = True) -> bytes:
        if with_witness and self._ser is not None:
            return self._ser
        out = bytearray()
        out += ser_u8(1 if self.is_coinbase else 0)
        out += ser_u32(len(self.inputs))
        for txin in self.inputs:
            out += txin.serialize(with_witness)
        out += ser_u32(len(self.outputs))
        for txout in self.outputs:
            out += txout.serialize()
        out += ser_u32(self.locktime)
        data = bytes(out)
        if with_witness:
            self._ser = data
        return data

    @property
    def txid(self) -> Digest256:
        if self._txid is None:
            self._txid = double_sha256(self.serialize())
        return self._txid

    def sighash(self) -> Digest256:
        """Digest signed by every input: the transaction minus witnesses."""
        if self._sighash is None:
            self._sighash = double_sha256(self.serialize(with_witness=False))
        return self._sighash

    def size(self) -> int:
        return len(self.serialize())


def serialize_tx(tx: Transaction) -> bytes:
    return tx.serialize()


def txid(tx: Transaction) -> Digest256:
    return tx.txid


def sighash(tx: Transaction) -> Digest256:
    return tx.sighash()


def deserialize_tx(data: bytes) -> Transaction:
    r = Reader(data)
    tx = read_tx(r)
    r.expect_done()
    return tx


def read_tx(r: Reader) -> Transaction:
    flags = r.u8()
    if flags not in (0, 1):
        raise DecodeError("bad transaction flags")
    is_coinbase = flags == 1
    inputs = []
    for _ in range(r.u32()):
        op = OutPoint(txid=r.take(32), index=r.u32())
        signature = r.bytes_()
        pubkey = r.bytes_()
        preimage: Optional[bytes] = r.bytes_()
        if preimage == _EMPTY:
            preimage = None
        rf = r.u8()
        if rf not in (0, 1):
            raise DecodeError("bad refund flag")
        seq = r.u32()
        inputs.append(
            TxIn(op, Witness(signature, pubkey, preimage, rf == 1), seq)
        )
    outputs = []
    for _ in range(r.u32()):
        value = r.u64()
        script = script_from_bytes(r.bytes_())
        if value > MAX_MONEY:
            raise DecodeError("output value out of range")
        outputs.append(TxOut(value, script))
    locktime = r.u32()
    if not is_coinbase and (not inputs or not outputs):
        raise DecodeError("non-coinbase needs inputs and outputs")
    return Transaction(inputs, outputs, locktime, is_coinbase)


def make_coinbase(subchain: int, height: int, outputs: list[TxOut]) -> Transaction:
    """Coinbase with a null input; (height, subchain) make its txid unique."""
    null_in = TxIn(
        prevout=OutPoint(_ZERO32, _COINBASE_INDEX),
        witness=Witness(),
        sequence=subchain,
    )
    return Transaction([null_in], outputs, locktime=height, is_coinbase=True)


def eval_script(script: Script, witness: Witness, sighash: Digest256, height: int) -> bool:
    """Script success predicate. Malformed witnesses yield False, not errors."""
    try:
        if isinstance(script, P2pkhScript):
            if crypto.address_hash(witness.pubkey) != script.address_hash:
                return False
            return crypto.verify(witness.pubkey, sighash, witness.signature)
        if isinstance(script, HtlcScript):
            if witness.refund:
                if height < script.timelock:
                    return False
                if crypto.address_hash(witness.pubkey) != script.sender:
                    return False
            else:
                if witness.preimage is None:
                    return False
                if double_sha256(witness.preimage) != script.hashlock:
                    return False
                if crypto.address_hash(witness.pubkey) != script.receiver:
                    return False
            return crypto.verify(witness.pubkey, sighash, witness.signature)
        return False
    except Exception:
        return False


@dataclass(frozen=True)
class UtxoEntry:
    out: TxOut
    height: int
    coinbase: bool = False
    # Pinned entries were placed here by a cross-chain transfer and are
    # exempt from the script-hash partition invariant.
    pinned: bool = False

    @property
    def value(self) -> int:
        return self.out.value


@dataclass
class ChainState:
    """Per-sub-chain UTXO store owning a half-open script-hash interval."""

    subchain: int
    depth: int
    lo: int
    hi: int
    entries: dict[OutPoint, UtxoEntry] = field(default_factory=dict)

    @classmethod
    def genesis(cls) -> "ChainState":
        return cls(subchain=0, depth=0, lo=0, hi=HASH_SPACE)

    def owns(self, h: Digest256) -> bool:
        return self.lo <= int.from_bytes(h, "big") < self.hi

    def get(self, outpoint: OutPoint) -> Optional[UtxoEntry]:
        return self.entries.get(outpoint)

    def total_value(self) -> int:
        return sum(e.value for e in self.entries.values())

    def copy(self) -> "ChainState":
        return ChainState(self.subchain, self.depth, self.lo, self.hi, dict(self.entries))


@dataclass
class UndoRecord:
    txid: Digest256
    spent: list[tuple[OutPoint, UtxoEntry]]
    created: list[OutPoint]


def _resolve_inputs(
    tx: Transaction,
    state: ChainState,
    siblings: Optional[Iterable[ChainState]],
) -> list[UtxoEntry]:
    """Look up every prevout in `state`, probing siblings to tell a foreign
    sub-chain's output apart from an unknown one."""
    entries = []
    seen: set[OutPoint] = set()
    for txin in tx.inputs:
        if txin.prevout in seen:
            raise DoubleSpendInBlock(f"duplicate input {txin.prevout.hex()}")
        seen.add(txin.prevout)
        entry = state.entries.get(txin.prevout)
        if entry is None:
            if siblings is not None:
                for sib in siblings:
                    if sib.subchain == state.subchain:
                        continue
                    if txin.prevout in sib.entries:
                        raise MixedSubchains(
                            f"input {txin.prevout.hex()} belongs to sub-chain {sib.subchain}"
                        )
            raise MissingUtxo(f"unknown outpoint {txin.prevout.hex()}")
        entries.append(entry)
    return entries


def validate_transaction(
    tx: Transaction,
    state: ChainState,
    height: int,
    siblings: Optional[Iterable[ChainState]] = None,
) -> int:
    """Full context validation against one sub-chain's state. Returns the fee."""
    if tx.is_coinbase:
        raise ValueError("coinbase transactions are validated at the block level")
    entries = _resolve_inputs(tx, state, siblings)
    for txin, entry in zip(tx.inputs, entries):
        if entry.coinbase and height - entry.height < COINBASE_MATURITY:
            raise ImmatureLocktime(
                f"coinbase {txin.prevout.hex()} needs {COINBASE_MATURITY} confirmations"
            )
    if tx.locktime > height:
        raise ImmatureLocktime(f"locktime {tx.locktime} > height {height}")
    total_in = sum(e.value for e in entries)
    total_out = sum(o.value for o in tx.outputs)
    if total_out > total_in:
        raise ValueOverspend(f"outputs {total_out} exceed inputs {total_in}")
    digest = tx.sighash()
    for i, (txin, entry) in enumerate(zip(tx.inputs, entries)):
        if not eval_script(entry.out.script_pubkey, txin.witness, digest, height):
            raise ScriptFailure(f"input {i} script evaluation failed")
    return total_in - total_out


def apply_transaction(state: ChainState, tx: Transaction, height: int) -> UndoRecord:
    """Apply a validated transaction to one state.

    Outputs whose script hash falls outside this state's interval are not
    inserted here; block-level connect routes them to their home sub-chain.
    """
    spent: list[tuple[OutPoint, UtxoEntry]] = []
    if not tx.is_coinbase:
        for txin in tx.inputs:
            entry = state.entries.pop(txin.prevout, None)
            if entry is None:
                for op, e in spent:
                    state.entries[op] = e
                raise ValueError(f"apply of non-validated tx: missing {txin.prevout.hex()}")
            spent.append((txin.prevout, entry))
    created: list[OutPoint] = []
    for i, out in enumerate(tx.outputs):
        if state.owns(script_hash(out.script_pubkey)):
            op = OutPoint(tx.txid, i)
            state.entries[op] = UtxoEntry(out, height, coinbase=tx.is_coinbase)
            created.append(op)
    return UndoRecord(tx.txid, spent, created)


def revert_transaction(state: ChainState, tx: Transaction, undo: UndoRecord) -> None:
    if undo.txid != tx.txid:
        raise ValueError("undo record does not match transaction")
    for op in undo.created:
        if state.entries.pop(op, None) is None:
            raise ValueError(f"revert expected entry {op.hex()}")
    for op, entry in undo.spent:
        if op in state.entries:
            raise ValueError(f"revert would overwrite {op.hex()}")
        state.entries[op] = entry


@dataclass
class _PoolTx:
    tx: Transaction
    fee: int
    # fee/size as a 64-bit fixed-point integer: exact ordering (sizes are far
    # below 2**32, so distinct rationals never collide) without Fraction
    # comparison overhead in block-template sorts
    fee_rate_key: int


class Mempool:
    """Pending transactions for one sub-chain, kept conflict-free."""

    def __init__(self, subchain: int):
        self.subchain = subchain
        self.pending: dict[Digest256, _PoolTx] = {}
        self.by_outpoint: dict[OutPoint, Digest256] = {}

    def __len__(self) -> int:
        return len(self.pending)

    def __contains__(self, tx_id: Digest256) -> bool:
        return tx_id in self.pending

    def transactions(self) -> Iterator[Transaction]:
        return (p.tx for p in self.pending.values())

    def accept(
        self,
        state: ChainState,
        tx: Transaction,
        height: int,
        siblings: Optional[Iterable[ChainState]] = None,
    ) -> int:
        """Validate and admit a transaction; returns its fee."""
        if tx.txid in self.pending:
            raise ConflictingSpend("transaction already pending")
        fee = validate_transaction(tx, state, height, siblings)
        for txin in tx.inputs:
            other = self.by_outpoint.get(txin.prevout)
            if other is not None:
                raise ConflictingSpend(
                    f"outpoint {txin.prevout.hex()} already spent by {other.hex()}"
                )
        entry = _PoolTx(tx, fee, (fee << 64) // tx.size())
        self.pending[tx.txid] = entry
        for txin in tx.inputs:
            self.by_outpoint[txin.prevout] = tx.txid
        return fee

    def drop(self, tx_id: Digest256) -> Optional[Transaction]:
        entry = self.pending.pop(tx_id, None)
        if entry is None:
            return None
        for txin in entry.tx.inputs:
            self.by_outpoint.pop(txin.prevout, None)
        return entry.tx

    def remove_spent(self, outpoints: Iterable[OutPoint]) -> list[Transaction]:
        """Drop every pending transaction spending any of the given outpoints.

        Called after a block connects; removes confirmed transactions and any
        pending conflicts they displace.
        """
        dropped = []
        for op in outpoints:
            tx_id = self.by_outpoint.get(op)
            if tx_id is not None:
                tx = self.drop(tx_id)
                if tx is not None:
                    dropped.append(tx)
        return dropped

    def select_for_block(self, capacity: int) -> list[Transaction]:
        """Greedy fee-rate selection, ties broken by ascending txid."""
        order = sorted(
            self.pending.values(), key=lambda p: (-p.fee_rate_key, p.tx.txid)
        )
        return [p.tx for p in order[:capacity]]

    def fee_of(self, tx_id: Digest256) -> int:
        return self.pending[tx_id].fee


def export_chainstate(state: ChainState, height: int = 0, issued: int = 0) -> bytes:
    """Sorted flat-file snapshot used for cross-node determinism checks.

    One record per entry: outpoint txid hex, output index, value, script hex,
    creation height, coinbase flag, pinned flag. Records are sorted by the
    binary (txid, index) key, so identical states export identical bytes.
    """
    header = (
        f"# splitscale chainstate subchain={state.subchain} depth={state.depth}"
        f" lo={state.lo:x} hi={state.hi:x} height={height} issued={issued}\n"
    )
    lines = []
    for op in sorted(state.entries, key=lambda o: (o.txid, o.index)):
        e = state.entries[op]
        lines.append(
            f"{op.txid.hex()} {op.index} {e.value} {e.out.script_pubkey.serialize().hex()}"
            f" {e.height} {1 if e.coinbase else 0} {1 if e.pinned else 0}\n"
        )
    return (header + "".join(lines)).encode()


def import_chainstate(data: bytes) -> tuple[ChainState, int, int]:
    """Inverse of export_chainstate. Returns (state, height, issued)."""
    lines = data.decode().splitlines()
    if not lines or not lines[0].startswith("# splitscale chainstate "):
        raise DecodeError("missing chainstate header")
    meta = dict(part.split("=", 1) for part in lines[0].split()[3:])
    state = ChainState(
        subchain=int(meta["subchain"]),
        depth=int(meta["depth"]),
        lo=int(meta["lo"], 16),
        hi=int(meta["hi"], 16),
    )
    for ln in lines[1:]:
        if not ln:
            continue
        txid_hex, index, value, script_hex, h, cb, pin = ln.split()
        op = OutPoint(bytes.fromhex(txid_hex), int(index))
        entry = UtxoEntry(
            TxOut(int(value), script_from_bytes(bytes.fromhex(script_hex))),
            int(h),
            coinbase=cb == "1",
            pinned=pin == "1",
        )
        if op in state.entries:
            raise DecodeError(f"duplicate outpoint {op.hex()}")
        state.entries[op] = entry
    return state, int(meta["height"]), int(meta["issued"])


def revert_ops(states: dict[int, ChainState], ops: list[tuple]) -> None:
    """Reverse a sequence of connect-time state ops, newest first.

    Ops are ("del", subchain, outpoint, entry) for removals and
    ("add", subchain, outpoint) for insertions. A mismatch means the undo
    record does not belong to the current state, which is a contract
    violation, not a validation failure.
    """
    for op in reversed(ops):
        if op[0] == "del":
            _, sid, outpoint, entry = op
            if outpoint in states[sid].entries:
                raise ValueError(f"revert would overwrite {outpoint.hex()}")
            states[sid].entries[outpoint] = entry
        elif op[0] == "add":
            _, sid, outpoint = op
            if states[sid].entries.pop(outpoint, None) is None:
                raise ValueError(f"revert expected entry {outpoint.hex()}")
        else:
            raise ValueError(f"unknown op kind {op[0]!r}")


def audit_partition(state: ChainState) -> None:
    """Full-scan check that every non-pinned entry routes to this state."""
    for op, entry in state.entries.items():
        if entry.pinned:
            continue
        h = script_hash(entry.out.script_pubkey)
        if not state.owns(h):
            raise AuditError(
                f"entry {op.hex()} with script hash {h.hex()} stored on"
                f" sub-chain {state.subchain} outside [{state.lo:x}, {state.hi:x})"
            )
