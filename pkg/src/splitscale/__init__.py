"""Deterministic simulator for a partitioned UTXO ledger.

The protocol splits a Bitcoin-like ledger's UTXO space into independently
mined sub-chains coordinated by an eigenchain, with full and half node
roles, multi-leg HTLC payments, and eigentransactions for cross-sub-chain
transfers.
"""

__version__ = "0.1.0"
