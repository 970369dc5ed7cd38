"""Line-oriented scenario files driving the simulator.

One directive per line; `key=value` arguments; `#` starts a comment. The
parser reports every problem it finds with its line number rather than
stopping at the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from . import crypto
from .chain import MAX_TARGET, ConsensusParams
from .netsim import (
    EigentxAction,
    LinkSpec,
    NodeSpec,
    PayAction,
    SimConfig,
    WalletSpec,
)
from .splitter import SplitDirective
from .xfer import Wallet

__all__ = ["Scenario", "ScenarioError", "parse_scenario", "KNOWN_METRICS"]

KNOWN_METRICS = ("scale_factor", "bandwidth_ratio", "miner_fees")

_DEFAULT_INTERVAL_MS = 600_000


class ScenarioError(Exception):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass
class Scenario:
    name: str
    config: SimConfig
    metrics: list[str] = field(default_factory=list)


class _Parser:
    def __init__(self, text: str, name: str):
        self.name = name
        self.lines = text.splitlines()
        self.diags: list[str] = []
        self.config = SimConfig(nodes=[], links=[], wallets=[])
        self.metrics: list[str] = []
        self.compression = 1000
        self.interval_ms: Optional[int] = None
        self.duration_ms: Optional[int] = None
        self.duration_blocks: Optional[int] = None
        self.sub_bits = 4
        self.eigen_bits = 8
        self.params_kwargs: dict = {}
        self.action_order: list[tuple[int, int]] = []  # (line, height)

    def err(self, lineno: int, msg: str) -> None:
        self.diags.append(f"line {lineno}: {msg}")

    def _kv(self, lineno: int, tokens: list[str], allowed: dict) -> Optional[dict]:
        """Parse key=value tokens against {key: converter}; None on error."""
        out = {}
        ok = True
        for tok in tokens:
            if "=" not in tok:
                self.err(lineno, f"expected key=value, got {tok!r}")
                ok = False
                continue
            key, value = tok.split("=", 1)
            if key not in allowed:
                self.err(lineno, f"unknown key {key!r}")
                ok = False
                continue
            try:
                out[key] = allowed[key](value)
            except (ValueError, ZeroDivisionError) as exc:
                self.err(lineno, f"bad value for {key!r}: {exc}")
                ok = False
        return out if ok else None

    def _scalar(self, lineno: int, tokens: list[str], conv, what: str):
        if len(tokens) != 1:
            self.err(lineno, f"{what} takes exactly one value")
            return None
        try:
            return conv(tokens[0])
        except ValueError as exc:
            self.err(lineno, f"bad {what}: {exc}")
            return None

    def parse(self) -> Scenario:
        for lineno, raw in enumerate(self.lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            verb, rest = tokens[0], tokens[1:]
            handler = getattr(self, f"_verb_{verb}", None)
            if handler is None:
                self.err(lineno, f"unknown directive {verb!r}")
                continue
            handler(lineno, rest)
        self._finish()
        if self.diags:
            raise ScenarioError(self.diags)
        return Scenario(self.name, self.config, self.metrics or list(KNOWN_METRICS[:2]))

    # -- global settings -----------------------------------------------------

    def _verb_seed(self, lineno, rest):
        if len(rest) != 1:
            self.err(lineno, "seed takes exactly one value")
            return
        self.config.seed = rest[0]

    def _verb_duration(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "duration (seconds)")
        if v is not None:
            self.duration_ms = v * 1000

    def _verb_duration_blocks(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "duration (blocks)")
        if v is not None:
            self.duration_blocks = v

    def _verb_compression(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "compression factor")
        if v is not None:
            if v <= 0:
                self.err(lineno, "compression must be positive")
            else:
                self.compression = v

    def _verb_interval_ms(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "interval (ms)")
        if v is not None:
            self.interval_ms = v

    def _verb_capacity(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "capacity")
        if v is not None:
            self.params_kwargs["block_tx_capacity"] = v

    def _verb_subsidy(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "subsidy")
        if v is not None:
            self.params_kwargs["subsidy_initial"] = v

    def _verb_halving(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "halving interval")
        if v is not None:
            self.params_kwargs["subsidy_halving"] = v

    def _verb_subchain_target_bits(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "target bits")
        if v is not None:
            self.sub_bits = v

    def _verb_eigen_target_bits(self, lineno, rest):
        v = self._scalar(lineno, rest, int, "target bits")
        if v is not None:
            self.eigen_bits = v

    def _verb_eigentx_window(self, lineno, rest):
        kv = self._kv(lineno, rest, {"start": int, "end": int})
        if kv is None:
            return
        if "start" not in kv or "end" not in kv:
            self.err(lineno, "eigentx_window needs start= and end=")
            return
        self.params_kwargs["eigentx_window"] = (kv["start"], kv["end"])

    def _verb_metric(self, lineno, rest):
        if len(rest) != 1 or rest[0] not in KNOWN_METRICS:
            self.err(lineno, f"metric must be one of {', '.join(KNOWN_METRICS)}")
            return
        self.metrics.append(rest[0])

    # -- topology ------------------------------------------------------------

    def _verb_node(self, lineno, rest):
        if not rest:
            self.err(lineno, "node needs a name")
            return
        name, args = rest[0], rest[1:]
        kv = self._kv(
            lineno, args, {"role": str, "hashpower": Fraction, "track": int}
        )
        if kv is None:
            return
        role = kv.get("role")
        if role not in ("miner", "full", "half"):
            self.err(lineno, "node role must be miner, full, or half")
            return
        hashpower = kv.get("hashpower", Fraction(1) if role == "miner" else Fraction(0))
        self.config.nodes.append(
            NodeSpec(name, role, hashpower=hashpower, track=kv.get("track", 0))
        )

    def _verb_link(self, lineno, rest):
        if len(rest) < 2:
            self.err(lineno, "link needs two node names")
            return
        a, b, args = rest[0], rest[1], rest[2:]
        kv = self._kv(lineno, args, {"latency": int, "up_at": int})
        if kv is None:
            return
        self.config.links.append(
            LinkSpec(a, b, latency_ms=kv.get("latency", 20), up_at_ms=kv.get("up_at", 0))
        )

    # -- wallets and demand ----------------------------------------------------

    def _verb_wallet(self, lineno, rest):
        if not rest:
            self.err(lineno, "wallet needs a name")
            return
        name, args = rest[0], rest[1:]
        kv = self._kv(lineno, args, {"funds": int, "utxos": int, "node": str})
        if kv is None:
            return
        if "funds" not in kv:
            self.err(lineno, "wallet needs funds=")
            return
        self.config.wallets.append(
            WalletSpec(name, kv["funds"], kv.get("utxos", 1), kv.get("node"))
        )

    def _verb_wallets(self, lineno, rest):
        kv = self._kv(
            lineno,
            rest,
            {
                "count": int,
                "funds": int,
                "utxos": int,
                "node": str,
                "balance_depth": int,
            },
        )
        if kv is None:
            return
        if "count" not in kv or "funds" not in kv:
            self.err(lineno, "wallets needs count= and funds=")
            return
        depth = kv.get("balance_depth", 0)
        for i in range(kv["count"]):
            name = f"w{i:03d}"
            seed = _balanced_wallet_seed(name, i, depth)
            self.config.wallets.append(
                WalletSpec(name, kv["funds"], kv.get("utxos", 1), kv.get("node"), seed)
            )

    def _verb_demand(self, lineno, rest):
        kv = self._kv(lineno, rest, {"rate": Fraction})
        if kv is None or "rate" not in kv:
            self.err(lineno, "demand needs rate= (transactions per second per wallet)")
            return
        if kv["rate"] <= 0:
            self.err(lineno, "demand rate must be positive")
            return
        self.config.demand_mean_ms = max(1, int(1000 / kv["rate"]))

    # -- scripted actions ------------------------------------------------------

    def _note_height(self, lineno: int, height: int) -> None:
        if self.action_order and height < self.action_order[-1][1]:
            self.err(lineno, "action heights must be sorted")
        self.action_order.append((lineno, height))

    def _verb_split(self, lineno, rest):
        kv = self._kv(lineno, rest, {"at_height": int, "mode": str})
        if kv is None:
            return
        if "at_height" not in kv:
            self.err(lineno, "split needs at_height=")
            return
        mode = kv.get("mode", "logical")
        if mode not in ("logical", "economic"):
            self.err(lineno, "split mode must be logical or economic")
            return
        self._note_height(lineno, kv["at_height"])
        new_depth = len(self.config.splits) + 1
        self.config.splits.append(SplitDirective(kv["at_height"], mode, new_depth))

    def _verb_pay(self, lineno, rest):
        kv = self._kv(
            lineno,
            rest,
            {"from": str, "to": str, "amount": int, "via": str, "at_height": int, "fee": int},
        )
        if kv is None:
            return
        missing = [k for k in ("from", "to", "amount", "at_height") if k not in kv]
        if missing:
            self.err(lineno, f"pay needs {', '.join(m + '=' for m in missing)}")
            return
        if kv.get("via", "htlc") != "htlc":
            self.err(lineno, "only via=htlc payments are supported")
            return
        self._note_height(lineno, kv["at_height"])
        self.config.pays.append(
            PayAction(kv["at_height"], kv["from"], kv["to"], kv["amount"], kv.get("fee", 200))
        )

    def _verb_eigentx(self, lineno, rest):
        kv = self._kv(
            lineno,
            rest,
            {"wallet": str, "from": int, "to": int, "amount": int, "at_height": int},
        )
        if kv is None:
            return
        missing = [k for k in ("wallet", "from", "to", "amount", "at_height") if k not in kv]
        if missing:
            self.err(lineno, f"eigentx needs {', '.join(m + '=' for m in missing)}")
            return
        self._note_height(lineno, kv["at_height"])
        self.config.eigentxs.append(
            EigentxAction(kv["at_height"], kv["wallet"], kv["from"], kv["to"], kv["amount"])
        )

    # -- assembly ----------------------------------------------------------------

    def _finish(self) -> None:
        interval = self.interval_ms
        if interval is None:
            interval = max(1, _DEFAULT_INTERVAL_MS // self.compression)
        self.config.interval_ms = interval
        if self.duration_ms is not None:
            self.config.duration_ms = self.duration_ms
        elif self.duration_blocks is not None:
            self.config.duration_ms = self.duration_blocks * interval
        else:
            self.diags.append("scenario needs a duration or duration_blocks line")
            return
        if not 0 <= self.eigen_bits < 256 or not 0 <= self.sub_bits < 256:
            self.diags.append("target bits must be in [0, 256)")
            return
        try:
            self.config.params = ConsensusParams(
                subchain_target=MAX_TARGET >> self.sub_bits,
                eigen_target=MAX_TARGET >> self.eigen_bits,
                **self.params_kwargs,
            )
        except Exception as exc:
            self.diags.append(f"bad consensus parameters: {exc}")
            return
        for problem in self.config.validate():
            self.diags.append(problem)


def _balanced_wallet_seed(name: str, index: int, depth: int) -> bytes:
    """Find a wallet seed whose address routes to sub-chain index % 2**depth.

    Keeps bulk demand wallets spread evenly over the sub-chains that exist
    after `depth` splits, so every sub-chain sees traffic.
    """
    if depth == 0:
        return f"wallet:{name}".encode()
    want = index % (1 << depth)
    attempt = 0
    while True:
        seed = f"wallet:{name}:{attempt}".encode()
        wallet = Wallet(name, seed=seed)
        if crypto.assign_subchain(wallet.script_hash, depth) == want:
            return seed
        attempt += 1


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Parse scenario text; raises ScenarioError carrying all diagnostics."""
    return _Parser(text, name).parse()
