import random

import pytest

from splitscale import chain, crypto, ledger, xfer
from splitscale.chain import (
    BadArity,
    BadCoinbaseValue,
    BadEigenTx,
    BadPow,
    BadTx,
    BlockHeader,
    BlockIndex,
    CompositeBlock,
    CompositeInvalid,
    ConsensusParams,
    CrossRefMismatch,
    HeightMismatch,
    IndexEntry,
    MAX_TARGET,
    Tips,
    choose_fork,
    connect_composite,
    deserialize_composite,
    disconnect_composite,
    merkle_root,
    mine_composite,
    retarget,
    serialize_composite,
    validate_composite,
)
from splitscale.crypto import ConfigError, double_sha256
from splitscale.encoding import DecodeError
from splitscale.ledger import Mempool, OutPoint, TxOut
from splitscale.xfer import Eigentransaction, Wallet

from helpers import Harness, fund_and_mature, wallet_on_subchain


def oracle_merkle(leaves):
    # independent recursion: pair up, duplicating the odd tail
    if len(leaves) == 1:
        return leaves[0]
    if len(leaves) % 2:
        leaves = leaves + [leaves[-1]]
    return oracle_merkle(
        [double_sha256(leaves[i] + leaves[i + 1]) for i in range(0, len(leaves), 2)]
    )


class TestMerkle:
    def test_single_element_is_its_own_root(self):
        h = double_sha256(b"x")
        assert merkle_root([h]) == h

    def test_matches_oracle_for_small_sizes(self):
        rng = random.Random(4)
        for n in range(1, 9):
            leaves = [bytes(rng.randrange(256) for _ in range(32)) for _ in range(n)]
            assert merkle_root(leaves) == oracle_merkle(leaves)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            merkle_root([])


class TestHeader:
    def test_hash_is_double_sha_of_fixed_layout(self):
        h = BlockHeader(b"\x01" * 32, b"\x02" * 32, 7, MAX_TARGET >> 4, 99, 1234)
        raw = h.serialize()
        assert len(raw) == 116
        assert h.hash() == double_sha256(raw)

    def test_meets_target_boundary(self):
        h = BlockHeader(b"\x01" * 32, b"\x02" * 32, 7, 0, 99, 1234)
        exact = int.from_bytes(h.hash(), "big")
        h.target = exact
        assert h.meets_target()
        h.target = exact - 1
        assert not h.meets_target()


class TestParams:
    def test_eigen_must_be_harder(self):
        with pytest.raises(ConfigError):
            ConsensusParams(subchain_target=100, eigen_target=100)

    def test_subsidy_halves(self):
        p = ConsensusParams(subsidy_initial=50, subsidy_halving=10)
        assert p.subsidy(0) == 0
        assert p.subsidy(1) == 50
        assert p.subsidy(10) == 50
        assert p.subsidy(11) == 25

    def test_route_logical(self):
        p = ConsensusParams(depth=2)
        assert p.route(b"\xc0" + b"\x00" * 31) == 3
        assert p.route(b"\x00" * 32) == 0


class TestMining:
    def test_depth_zero_empty_mempool(self):
        h = Harness(seed="mine0")
        cb = h.mine()
        assert len(cb.subblocks) == 1
        assert len(cb.subblocks[0].txs) == 1  # coinbase only
        assert cb.subblocks[0].txs[0].is_coinbase
        assert cb.eigen.reward.amount == h.params.subsidy(1)

    def test_depth_one_fee_revenue_sums_over_subchains(self):
        w0 = wallet_on_subchain(0, 1, "mine")
        w1 = wallet_on_subchain(1, 1, "mine")
        dest = Wallet("mine-dest")
        h = fund_and_mature("mine1", (w0, w1), (100_000, 100_000))
        h.split()
        h.mine()
        # one payment per sub-chain with the exact fees from the example
        for wallet, fee in ((w0, 300), (w1, 500)):
            coins = wallet.spendable(h.states, h.height + 1)
            sid = next(iter(coins))
            tx = wallet.build_payment(coins[sid], dest.script, 1_000, fee=fee)
            h.submit(tx)
        cb = h.mine()
        coinbase_total = sum(
            o.value for sb in cb.subblocks for o in sb.txs[0].outputs
        )
        assert coinbase_total == 800

    def test_depth_two_arity(self):
        h = Harness(seed="mine2")
        h.mine()
        h.split()
        h.mine()
        h.split()
        cb = h.mine()
        assert len(cb.subblocks) == 4
        assert [sb.subchain for sb in cb.subblocks] == [0, 1, 2, 3]
        assert len(cb.eigen.subchain_header_hashes) == 4

    def test_pow_satisfied_everywhere(self):
        h = Harness(seed="mine3")
        cb = h.mine()
        assert cb.eigen.header.meets_target()
        assert all(sb.header.meets_target() for sb in cb.subblocks)


def _rebuild(cb, params, seed=9):
    """Recompute roots, re-grind headers, and rebind the eigen commitments
    after a test tampered with block contents."""
    rng = random.Random(seed)
    for sb in cb.subblocks:
        sb.header.payload_root = sb.payload_root()
        chain._grind(sb.header, rng)
    cb.eigen.subchain_header_hashes = [sb.hash() for sb in cb.subblocks]
    cb.eigen.header.payload_root = cb.eigen.payload_root()
    chain._grind(cb.eigen.header, rng)
    return cb


class TestValidateComposite:
    def make(self, seed="vc"):
        w0 = wallet_on_subchain(0, 1, seed)
        dest = Wallet(f"{seed}-dest")
        h = fund_and_mature(seed, (w0,), (200_000,))
        h.split()
        h.mine()
        coins = w0.spendable(h.states, h.height + 1)
        tx = w0.build_payment(coins[0], dest.script, 1_000, fee=250)
        h.submit(tx)
        tips_before = chain.Tips(
            h.tips.height, h.tips.eigen, dict(h.tips.subchains)
        )
        cb = h.mine()
        return h, cb, tips_before

    def test_honest_block_validates(self):
        h, cb, tips = self.make("vc0")
        validate_composite(cb, tips, h.params, self._rewind(h, cb))

    def _rewind(self, h, cb):
        # states as they were before cb connected
        chain.disconnect_composite(h.states, h.undos[-1])
        return h.states

    def test_bad_arity(self):
        h, cb, tips = self.make("vc1")
        states = self._rewind(h, cb)
        broken = CompositeBlock(cb.eigen, cb.subblocks[:1])
        with pytest.raises(BadArity):
            validate_composite(broken, tips, h.params, states)

    def test_foreign_target_is_bad_pow(self):
        h, cb, tips = self.make("vc2")
        states = self._rewind(h, cb)
        cb.eigen.header.target = h.params.eigen_target * 2
        with pytest.raises(BadPow):
            validate_composite(cb, tips, h.params, states)

    def test_mutated_tx_breaks_cross_reference(self):
        h, cb, tips = self.make("vc3")
        states = self._rewind(h, cb)
        victim = cb.subblocks[0].txs[-1]
        mutated = ledger.deserialize_tx(
            bytearray(victim.serialize()[:-1]) + bytes([victim.serialize()[-1] ^ 1])
        )
        cb.subblocks[0].txs[-1] = mutated
        with pytest.raises((CrossRefMismatch, BadTx)):
            validate_composite(cb, tips, h.params, states)

    def test_overspending_tx_rejected_after_rebuild(self):
        h, cb, tips = self.make("vc4")
        states = self._rewind(h, cb)
        w = Wallet("vc4-thief")
        bogus = ledger.Transaction(
            [ledger.TxIn(OutPoint(b"\x77" * 32, 0))], [TxOut(5, w.script)]
        )
        w.sign_inputs(bogus)
        cb.subblocks[1].txs.append(bogus)
        _rebuild(cb, h.params)
        with pytest.raises(BadTx):
            validate_composite(cb, tips, h.params, states)

    def test_coinbase_value_enforced(self):
        h, cb, tips = self.make("vc5")
        states = self._rewind(h, cb)
        sb = cb.subblocks[0]
        sb.txs[0] = ledger.make_coinbase(
            0, cb.height, [TxOut(sum(o.value for o in sb.txs[0].outputs) + 1,
                                 sb.txs[0].outputs[0].script_pubkey)]
        )
        _rebuild(cb, h.params)
        with pytest.raises(BadCoinbaseValue):
            validate_composite(cb, tips, h.params, states)

    def test_reward_value_enforced(self):
        h, cb, tips = self.make("vc6")
        states = self._rewind(h, cb)
        cb.eigen.reward = chain.RewardRecord(
            cb.eigen.reward.payout_script, cb.eigen.reward.amount + 1
        )
        _rebuild(cb, h.params)
        with pytest.raises(BadCoinbaseValue):
            validate_composite(cb, tips, h.params, states)

    def test_bogus_eigentx_rejected(self):
        h, cb, tips = self.make("vc7")
        states = self._rewind(h, cb)
        w = Wallet("vc7-owner")
        etx = Eigentransaction.create(
            w.keypair, 10, 0, 1, [OutPoint(b"\x55" * 32, 0)]
        )
        cb.eigen.eigentxs.append(etx)
        cb.eigen.reward = chain.RewardRecord(
            cb.eigen.reward.payout_script,
            cb.eigen.reward.amount + xfer.EIGENTX_FEE,
        )
        _rebuild(cb, h.params)
        with pytest.raises(BadEigenTx):
            validate_composite(cb, tips, h.params, states)

    def test_wrong_parent_is_height_mismatch(self):
        h, cb, tips = self.make("vc8")
        states = self._rewind(h, cb)
        bad_tips = chain.Tips(tips.height, b"\x00" * 32, tips.subchains)
        with pytest.raises(HeightMismatch):
            validate_composite(cb, bad_tips, h.params, states)


class TestConnect:
    def test_connect_then_disconnect_restores_exports(self):
        w0 = wallet_on_subchain(0, 1, "cc")
        dest = Wallet("cc-dest")
        h = fund_and_mature("cc", (w0,), (90_000,))
        h.split()
        before = h.exports()
        coins = w0.spendable(h.states, h.height + 1)
        tx = w0.build_payment(coins[0], dest.script, 2_000, fee=50)
        h.submit(tx)
        h.mine()
        after = h.exports()
        assert after != before
        disconnect_composite(h.states, h.undos[-1])
        h.issued -= h.params.subsidy(h.height)
        h.tips = chain.Tips(
            h.height - 1,
            h.blocks[-2].hash(),
            {sb.subchain: sb.hash() for sb in h.blocks[-2].subblocks},
        )
        assert h.exports() == before

    def test_cross_subchain_output_routed(self):
        w0 = wallet_on_subchain(0, 1, "ccx")
        w1 = wallet_on_subchain(1, 1, "ccx")
        h = fund_and_mature("ccx", (w0,), (70_000,))
        h.split()
        coins = w0.spendable(h.states, h.height + 1)
        tx = w0.build_payment(coins[0], w1.script, 7_000, fee=0)
        h.submit(tx)
        h.mine()
        op = OutPoint(tx.txid, 0)
        assert op in h.states[1].entries
        assert op not in h.states[0].entries
        h.audit()

    def test_tip_heights_advance_in_lockstep(self):
        h = Harness(seed="cc2")
        h.mine()
        h.split()
        for _ in range(3):
            cb = h.mine()
            assert {sb.header.height for sb in cb.subblocks} == {cb.height}


class TestForkChoice:
    def entry(self, work, arrival, salt):
        header = BlockHeader(b"\x00" * 32, bytes([salt]) * 32, 1, MAX_TARGET, salt, 0)
        eigen = chain.EigenBlock(header, [b"\x00" * 32], [], chain.RewardRecord(
            ledger.P2pkhScript(b"\x00" * 20), 0))
        cb = CompositeBlock(eigen, [])
        return IndexEntry(cb=cb, parent=None, height=1, cum_work=work, arrival=arrival)

    def test_most_work_wins(self):
        a = self.entry(100, 5, 1)
        b = self.entry(101, 9, 2)
        assert choose_fork([a, b]) is b

    def test_tie_broken_by_arrival(self):
        a = self.entry(100, 1, 1)
        b = self.entry(100, 2, 2)
        assert choose_fork([a, b]) is a
        assert choose_fork([b, a]) is a

    def test_tie_broken_by_lower_hash_last(self):
        a = self.entry(100, 1, 1)
        b = self.entry(100, 1, 2)
        expected = a if a.hash() < b.hash() else b
        assert choose_fork([a, b]) is expected

    def test_block_index_reorg_paths(self):
        h = Harness(seed="fc")
        h.mine(3)
        index = BlockIndex(h.blocks[0])
        entries = [index.add(cb) for cb in h.blocks[1:]]
        tip = index.best_tip()
        assert tip.height == 3
        down, up = index.path_between(entries[0], entries[2])
        assert down == [] and [e.height for e in up] == [2, 3]


class TestRetarget:
    def setup_method(self):
        self.params = ConsensusParams()

    def test_on_target_unchanged(self):
        p = retarget(self.params, [600_000] * 20)
        assert p.subchain_target == self.params.subchain_target
        assert p.eigen_target == self.params.eigen_target

    def test_slow_blocks_double_targets(self):
        p = retarget(self.params, [1_200_000] * 20)
        assert p.subchain_target == self.params.subchain_target * 2
        assert p.eigen_target == self.params.eigen_target * 2

    def test_fast_blocks_clamp_at_quarter(self):
        p = retarget(self.params, [60_000] * 20)
        assert p.subchain_target == self.params.subchain_target // 4
        assert p.eigen_target == self.params.eigen_target // 4

    def test_compressed_reference(self):
        p = retarget(self.params, [1_200] * 20, reference_interval_ms=600)
        assert p.subchain_target == self.params.subchain_target * 2

    def test_ratio_preserved(self):
        p = retarget(self.params, [900_000] * 20)
        before = self.params.eigen_target / self.params.subchain_target
        after = p.eigen_target / p.subchain_target
        assert abs(before - after) < 1e-12


class TestCompositeSerialization:
    def make_block(self):
        w0 = wallet_on_subchain(0, 1, "ser")
        h = fund_and_mature("ser", (w0,), (50_000,))
        h.split()
        h.mine()
        coins = w0.spendable(h.states, h.height + 1)
        etx = Eigentransaction.create(
            w0.keypair,
            1_000,
            0,
            1,
            [coins[0][0][0]],
        )
        h.epool.accept(etx, h.states, h.height + 1)
        return h.mine()

    def test_roundtrip(self):
        cb = self.make_block()
        data = serialize_composite(cb)
        back = deserialize_composite(data)
        assert back.hash() == cb.hash()
        assert serialize_composite(back) == data
        assert len(back.eigen.eigentxs) == 1

    def test_truncation_rejected(self):
        data = serialize_composite(self.make_block())
        with pytest.raises(DecodeError):
            deserialize_composite(data[:-3])
        with pytest.raises(DecodeError):
            deserialize_composite(data + b"\x00")


class TestRouteAtDepth:
    def test_consistent_with_tree_contraction(self):
        wallets = [wallet_on_subchain(i, 2, "rad") for i in range(4)]
        h = fund_and_mature("rad", wallets, [30_000 + i for i in range(4)])
        h.split("economic")
        h.mine()
        h.split("economic")
        params = h.params
        assert params.boundaries
        rng = random.Random(1)
        for _ in range(200):
            digest = bytes(rng.randrange(256) for _ in range(32))
            assert params.route_at_depth(digest, 1) == params.route(digest) // 2
            assert params.route_at_depth(digest, 0) == 0
