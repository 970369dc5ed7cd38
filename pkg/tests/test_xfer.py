import random

import pytest

from splitscale import crypto, ledger, xfer
from splitscale.ledger import (
    ChainState,
    HtlcScript,
    OutPoint,
    TxOut,
    UtxoEntry,
    validate_transaction,
)
from splitscale.xfer import (
    EIGENTX_FEE,
    AddressMismatch,
    BadSignature,
    Eigenpool,
    Eigentransaction,
    InsufficientTotalBalance,
    SameSubchain,
    TimelockNotExpired,
    Wallet,
    WindowClosed,
    WrongPreimage,
    apply_eigentx,
    claim_htlc_leg,
    plan_htlc_payment,
    refund_htlc_leg,
    validate_eigentx,
)

from helpers import fund_and_mature, wallet_on_subchain


def states_with_balances(wallet, balances):
    """Depth-1 style states holding the wallet's coins per sub-chain."""
    mid = ledger.HASH_SPACE // 2
    states = {
        0: ChainState(0, 1, 0, mid),
        1: ChainState(1, 1, mid, ledger.HASH_SPACE),
    }
    for sid, value in balances.items():
        if value:
            op = OutPoint(bytes([sid + 1]) * 32, 0)
            states[sid].entries[op] = UtxoEntry(TxOut(value, wallet.script), 1)
    return states


class TestPlanHtlc:
    def setup_method(self):
        self.sender = Wallet("htlc-sender")
        self.receiver = Wallet("htlc-receiver")
        self.rng = random.Random(11)

    def plan(self, balances, amount, **kw):
        states = states_with_balances(self.sender, balances)
        return plan_htlc_payment(
            self.sender,
            states,
            amount,
            self.receiver.keypair.address_hash,
            height=20,
            rng=self.rng,
            **kw,
        )

    def test_single_chain_payment_is_one_leg(self):
        payment = self.plan({0: 10, 1: 0}, 6)
        assert len(payment.legs) == 1
        assert payment.legs[0].subchain == 0
        assert payment.legs[0].amount == 6

    def test_two_legs_share_hashlock_largest_first(self):
        payment = self.plan({0: 4, 1: 4}, 6)
        assert [(l.subchain, l.amount) for l in payment.legs] == [(0, 4), (1, 2)]
        locks = set()
        for leg in payment.legs:
            script = leg.htlc_out.script_pubkey
            assert isinstance(script, HtlcScript)
            locks.add(script.hashlock)
        assert locks == {payment.hashlock}
        assert payment.hashlock == crypto.double_sha256(payment.preimage)

    def test_staggered_timelocks(self):
        payment = self.plan({0: 4, 1: 4}, 6, timelock_base=100, stagger=10)
        assert [l.timelock for l in payment.legs] == [100, 110]

    def test_insufficient_balance(self):
        with pytest.raises(InsufficientTotalBalance):
            self.plan({0: 4, 1: 4}, 9)

    def test_legs_spend_only_their_subchain(self):
        payment = self.plan({0: 4, 1: 4}, 6)
        states = states_with_balances(self.sender, {0: 4, 1: 4})
        for leg in payment.legs:
            for txin in leg.tx.inputs:
                assert txin.prevout in states[leg.subchain].entries


class TestClaimRefund:
    def setup_method(self):
        self.sender = Wallet("cr-sender")
        self.receiver = Wallet("cr-receiver")
        self.preimage = b"\x5a" * 32
        self.script = HtlcScript(
            hashlock=crypto.double_sha256(self.preimage),
            timelock=50,
            receiver=self.receiver.keypair.address_hash,
            sender=self.sender.keypair.address_hash,
        )
        self.op = OutPoint(b"\x77" * 32, 0)
        self.out = TxOut(9_000, self.script)
        self.state = ChainState(0, 0, 0, ledger.HASH_SPACE)
        self.state.entries[self.op] = UtxoEntry(self.out, 1)

    def test_claim_validates_before_timelock(self):
        tx = claim_htlc_leg(self.op, self.out, self.preimage, self.receiver.keypair, 10)
        assert validate_transaction(tx, self.state, 10) == 0
        assert tx.outputs[0].script_pubkey.address_hash == self.receiver.keypair.address_hash

    def test_claim_wrong_preimage(self):
        with pytest.raises(WrongPreimage):
            claim_htlc_leg(self.op, self.out, b"\x00" * 32, self.receiver.keypair, 10)

    def test_refund_boundary(self):
        with pytest.raises(TimelockNotExpired):
            refund_htlc_leg(self.op, self.out, self.sender.keypair, 49)
        tx = refund_htlc_leg(self.op, self.out, self.sender.keypair, 50)
        assert validate_transaction(tx, self.state, 50) == 0
        with pytest.raises(ledger.ScriptFailure):
            # the same refund is not yet valid one block earlier
            validate_transaction(tx, self.state, 49)

    def test_published_preimage_unlocks_other_legs(self):
        tx = claim_htlc_leg(self.op, self.out, self.preimage, self.receiver.keypair, 10)
        revealed = tx.inputs[0].witness.preimage
        other_script = HtlcScript(
            hashlock=self.script.hashlock,
            timelock=60,
            receiver=self.receiver.keypair.address_hash,
            sender=self.sender.keypair.address_hash,
        )
        other_op = OutPoint(b"\x78" * 32, 0)
        other_out = TxOut(4_000, other_script)
        self.state.entries[other_op] = UtxoEntry(other_out, 1)
        tx2 = claim_htlc_leg(other_op, other_out, revealed, self.receiver.keypair, 11)
        assert validate_transaction(tx2, self.state, 11) == 0


class TestHtlcEndToEnd:
    def test_claim_and_refund_flows_on_chain(self):
        w0 = wallet_on_subchain(0, 1, "h2h")
        receiver = Wallet("h2h-receiver")
        h = fund_and_mature("h2h", (w0,), (50_000,))
        h.split()
        rng = random.Random(3)
        payment = plan_htlc_payment(
            w0, h.states, 12_000, receiver.keypair.address_hash,
            h.height, rng, timelock_base=h.height + 8, fee_per_leg=100,
        )
        for leg in payment.legs:
            h.submit(leg.tx)
        h.mine()
        leg = payment.legs[0]
        sid = next(
            s for s, st in h.states.items() if leg.htlc_outpoint in st.entries
        )
        claim = claim_htlc_leg(
            leg.htlc_outpoint,
            h.states[sid].entries[leg.htlc_outpoint].out,
            payment.preimage,
            receiver.keypair,
            h.height + 1,
        )
        h.submit(claim)
        h.mine()
        assert receiver.balance(h.states) == 12_000
        h.audit()


class TestEigentransactions:
    def setup_method(self):
        self.owner = Wallet("etx-owner")
        self.other = Wallet("etx-other")
        self.states = states_with_balances(self.owner, {0: 10_000, 1: 500})
        self.op = next(iter(self.states[0].entries))

    def make(self, amount=5_000, source=0, dest=1, ops=None, wallet=None):
        return Eigentransaction.create(
            (wallet or self.owner).keypair, amount, source, dest,
            ops if ops is not None else [self.op],
        )

    def test_valid_accepted(self):
        pool = Eigenpool()
        assert pool.accept(self.make(), self.states, 30) == EIGENTX_FEE
        assert len(pool) == 1

    def test_address_mismatch(self):
        with pytest.raises(AddressMismatch):
            validate_eigentx(self.make(wallet=self.other), self.states, 30)

    def test_same_subchain(self):
        with pytest.raises(SameSubchain):
            validate_eigentx(self.make(dest=0), self.states, 30)

    def test_window(self):
        etx = self.make()
        with pytest.raises(WindowClosed):
            validate_eigentx(etx, self.states, 30, window=(40, 50))
        assert validate_eigentx(etx, self.states, 45, window=(40, 50)) == EIGENTX_FEE

    def test_missing_utxo(self):
        with pytest.raises(ledger.MissingUtxo):
            validate_eigentx(
                self.make(ops=[OutPoint(b"\xde" * 32, 7)]), self.states, 30
            )

    def test_bad_signature(self):
        etx = self.make()
        etx.signature = b"\x00" * 64
        etx._etxid = None
        with pytest.raises(BadSignature):
            validate_eigentx(etx, self.states, 30)

    def test_overspend(self):
        with pytest.raises(ledger.ValueOverspend):
            validate_eigentx(self.make(amount=10_000), self.states, 30)

    def test_conflicting_source(self):
        pool = Eigenpool()
        pool.accept(self.make(), self.states, 30)
        with pytest.raises(ledger.ConflictingSpend):
            pool.accept(self.make(amount=4_000), self.states, 30)

    def test_apply_moves_balance_and_reverts(self):
        before = {sid: dict(s.entries) for sid, s in self.states.items()}
        etx = self.make(amount=5_000)
        ops = apply_eigentx(self.states, etx, 31)
        assert self.owner.balance({1: self.states[1]}) == 5_500
        dest_entry = self.states[1].entries[OutPoint(etx.etxid, 0)]
        assert dest_entry.pinned  # owner's hash routes to sub-chain 0 here
        change = self.states[0].entries[OutPoint(etx.etxid, 1)]
        assert change.value == 10_000 - 5_000 - EIGENTX_FEE
        total = sum(s.total_value() for s in self.states.values())
        assert total == 10_500 - EIGENTX_FEE
        ledger.revert_ops(self.states, ops)
        assert {sid: dict(s.entries) for sid, s in self.states.items()} == before

    def test_apply_respects_native_routing_when_unpinned(self):
        # owner whose script hash naturally routes to the destination
        owner = wallet_on_subchain(1, 1, "etx")
        states = states_with_balances(owner, {0: 2_000})
        op = next(iter(states[0].entries))
        etx = Eigentransaction.create(owner.keypair, 1_000, 0, 1, [op])
        apply_eigentx(states, etx, 31)
        assert not states[1].entries[OutPoint(etx.etxid, 0)].pinned
        for state in states.values():
            ledger.audit_partition(state)


class TestRefundTotality:
    def test_sender_recovers_everything_without_claims(self):
        w0 = wallet_on_subchain(0, 1, "rt")
        receiver = Wallet("rt-receiver")
        h = fund_and_mature("rt", (w0,), (40_000,))
        h.split()
        before = w0.balance(h.states, h.height)
        rng = random.Random(5)
        payment = plan_htlc_payment(
            w0, h.states, 9_000, receiver.keypair.address_hash,
            h.height, rng, timelock_base=h.height + 3, fee_per_leg=0,
        )
        for leg in payment.legs:
            h.submit(leg.tx)
        h.mine()
        while h.height < payment.max_timelock:
            h.mine()
        for leg in payment.legs:
            sid = next(
                s for s, st in h.states.items() if leg.htlc_outpoint in st.entries
            )
            refund = refund_htlc_leg(
                leg.htlc_outpoint,
                h.states[sid].entries[leg.htlc_outpoint].out,
                w0.keypair,
                h.height,
            )
            h.submit(refund)
        h.mine()
        assert w0.balance(h.states, None) >= before  # plus nothing lost
        assert receiver.balance(h.states) == 0
        h.audit()
