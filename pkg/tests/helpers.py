"""Shared test fixtures: wallet probes and a single-process chain harness."""

from __future__ import annotations

import random

from splitscale import chain, crypto, ledger, splitter, xfer
from splitscale.chain import ConsensusParams, Tips
from splitscale.ledger import ChainState, Mempool, TxOut
from splitscale.xfer import Eigenpool, Wallet


def wallet_on_subchain(target: int, depth: int, tag: str = "probe") -> Wallet:
    """First wallet whose address routes to `target` at logical depth."""
    i = 0
    while True:
        w = Wallet(f"{tag}:{depth}:{target}:{i}")
        if crypto.assign_subchain(w.script_hash, depth) == target:
            return w
        i += 1


class Harness:
    """Single-node chain driver: mine, connect, split, submit, at will."""

    def __init__(self, funding=None, params=None, seed="harness"):
        self.params = params or ConsensusParams()
        self.seed = seed
        self.rng = random.Random(seed)
        self.miner = Wallet(f"{seed}:miner")
        self.states = {0: ChainState.genesis()}
        self.pools = {0: Mempool(0)}
        self.epool = Eigenpool()
        self.genesis = chain.make_genesis(funding or [], self.params, seed)
        chain.connect_composite(self.states, self.genesis, self.params)
        self.tips = Tips(0, self.genesis.hash(), {0: self.genesis.subblocks[0].hash()})
        self.blocks = [self.genesis]
        self.undos = [None]
        self.issued = sum(o.value for o in self.genesis.subblocks[0].txs[0].outputs)

    @property
    def height(self):
        return self.tips.height

    def subchain_of(self, tx) -> int:
        for sid, state in self.states.items():
            if tx.inputs[0].prevout in state.entries:
                return sid
        raise KeyError("transaction inputs not found in any chainstate")

    def submit(self, tx) -> int:
        sid = self.subchain_of(tx)
        return self.pools[sid].accept(
            self.states[sid], tx, self.height + 1, list(self.states.values())
        )

    def mine(self, n: int = 1, validate: bool = True):
        cb = None
        for _ in range(n):
            cb = chain.mine_composite(
                self.pools,
                self.params,
                self.miner.script,
                self.rng,
                self.tips,
                timestamp=(self.height + 1) * 600_000,
                eigenpool=self.epool,
            )
            if validate:
                chain.validate_composite(cb, self.tips, self.params, self.states)
            undo = chain.connect_composite(self.states, cb, self.params)
            self.issued += self.params.subsidy(cb.height)
            spent = [
                txin.prevout
                for sb in cb.subblocks
                for tx in sb.txs[1:]
                for txin in tx.inputs
            ]
            for etx in cb.eigen.eigentxs:
                spent.extend(etx.source_outpoints)
            for pool in self.pools.values():
                pool.remove_spent(spent)
            self.epool.remove_spent(spent)
            self.tips = Tips(
                cb.height, cb.hash(), {sb.subchain: sb.hash() for sb in cb.subblocks}
            )
            self.blocks.append(cb)
            self.undos.append(undo)
            heights = {sb.header.height for sb in cb.subblocks}
            assert heights == {cb.eigen.header.height}, "tips out of alignment"
        return cb

    def split(self, mode: str = "logical"):
        directive = splitter.SplitDirective(self.height, mode, self.params.depth + 1)
        self.states, self.pools, self.params, _ = splitter.apply_split(
            self.states, self.pools, self.params, directive, self.height
        )
        subchains = {}
        for old, h in self.tips.subchains.items():
            subchains[2 * old] = h
            subchains[2 * old + 1] = h
        self.tips = Tips(self.tips.height, self.tips.eigen, subchains)
        self.epool = Eigenpool()

    def audit(self):
        for state in self.states.values():
            ledger.audit_partition(state)
        total = sum(s.total_value() for s in self.states.values())
        assert total == self.issued, f"supply {total} != issued {self.issued}"

    def exports(self) -> bytes:
        return b"".join(
            ledger.export_chainstate(self.states[s], self.height, self.issued)
            for s in sorted(self.states)
        )


def fund_and_mature(harness_seed="fund", wallets=(), amounts=(), params=None):
    """Harness whose genesis funds the given wallets, mined past maturity."""
    funding = [TxOut(a, w.script) for w, a in zip(wallets, amounts)]
    h = Harness(funding=funding, params=params, seed=harness_seed)
    h.mine(ledger.COINBASE_MATURITY)
    return h
