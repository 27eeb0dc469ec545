"""Event-driven decision pipeline.

Each feed event updates the price book.  Inside the trading window a change
triggers the consecutive loop: solve, verify, register the pair in the tabu
list, let the judgment step accept or reject it, and repeat with fresh
initial states until a run yields nothing tradable.

Decision-log event labels

    E1  feed triggered a solve
    E2  first tradable run of the event, accepted: open + order
    E3  later tradable run of the same event, accepted
    E4  run without a tradable verdict; tabu and open list untouched
    E5  tradable run rejected by judgment; tabu updated only
    E7  close confirmed; pair leaves the open list
    E8  tabu replaced by a copy of the open list before the next solve
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import TextIO

import numpy as np

from .config import Settings, parse_clock
from .feed import EventKind, FeedEvent, PriceBook, StockRef, Universe
from .marketgraph import NS_PER_DAY, MarketGraph, SimilarityMatrix
from .positions import LegPlan
from .qubo import QuboProblem
from .sbm import SbParams, XorshiftRng, solve_best_of, solver_penalty_weight
from .verify import DEFAULT_THRESHOLD, CyclePath, Outcome, Verdict, Violation, decode, evaluate

logger = logging.getLogger(__name__)

NS_PER_S = 10**9


class UnknownPair(LookupError):
    pass


def _raw_lots(stock: StockRef, a_trans: Decimal) -> int:
    ratio = Decimal(a_trans) / (stock.min_lot_shares * stock.base_price)
    return int(ratio.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def lot_size(stock: StockRef, a_trans: Decimal) -> int:
    """round(a_trans / (min_lot_shares * base_price)), half away from zero, at least 1."""
    lots = _raw_lots(stock, a_trans)
    if lots < 1:
        logger.warning("%s: lot size rounds to 0 at base %s; clamped to 1", stock.code, stock.base_price)
        return 1
    return lots


def tradable_universe(universe: Universe, a_trans: Decimal, clamp_lots: bool = False) -> tuple[Universe, list[str]]:
    """Drop stocks whose lot size rounds to zero unless ``clamp_lots``."""
    if clamp_lots:
        return universe, []
    keep, dropped = [], []
    for s in universe:
        if _raw_lots(s, a_trans) < 1:
            logger.warning("%s excluded: lot size rounds to 0", s.code)
            dropped.append(s.code)
        else:
            keep.append((s.code, s.min_lot_shares, s.base_price))
    if not keep:
        raise ValueError("no tradable stock left after lot sizing")
    return Universe.from_rows(keep), dropped


@dataclass(frozen=True)
class TradingWindow:
    """Session times in seconds after midnight of the feed's clock."""

    open_s: int = 9 * 3600
    close_s: int = 15 * 3600
    no_open_s: int = 15 * 60
    unwind_s: int = 5 * 60

    def __post_init__(self) -> None:
        if not 0 <= self.open_s < self.close_s <= 86_400:
            raise ValueError("session must open before it closes")
        if self.no_open_s < 0 or self.unwind_s < 0:
            raise ValueError("cutoffs must be non-negative")

    @staticmethod
    def seconds(ts: int) -> float:
        return (ts % NS_PER_DAY) / NS_PER_S

    def in_session(self, ts: int) -> bool:
        return self.open_s <= self.seconds(ts) < self.close_s

    def may_open(self, ts: int) -> bool:
        return self.open_s <= self.seconds(ts) < self.close_s - self.no_open_s

    def must_unwind(self, ts: int) -> bool:
        return self.seconds(ts) >= self.close_s - self.unwind_s


@dataclass(frozen=True)
class EngineConfig:
    p_max: int = 16
    a_trans: Decimal = Decimal(1_500_000)
    threshold: float = DEFAULT_THRESHOLD
    restarts_per_event: int = 16
    max_runs_per_event: int = 32
    window: TradingWindow = TradingWindow()
    sb: SbParams = SbParams()
    m_c: float = 1.0
    penalty_scale: float = 1.5
    m_p: float | None = None
    seed: int = 1
    kill_switch: bool = False
    clamp_lots: bool = False
    log_level: str = "actions"

    def __post_init__(self) -> None:
        if self.p_max < 1:
            raise ValueError("p_max must be >= 1")
        if not self.a_trans > 0:
            raise ValueError("a_trans must be positive")
        if self.restarts_per_event < 1 or self.max_runs_per_event < 1:
            raise ValueError("restarts_per_event and max_runs_per_event must be >= 1")
        if self.log_level not in ("off", "actions", "all"):
            raise ValueError("log_level must be off, actions or all")

    @classmethod
    def from_settings(cls, s: Settings) -> "EngineConfig":
        window = TradingWindow(
            parse_clock(s.session_open),
            parse_clock(s.session_close),
            s.no_open_minutes * 60,
            s.unwind_minutes * 60,
        )
        sb = SbParams(s.n_steps, s.dt, s.a0, s.c0, s.machine_size, s.a0_scale, s.c0_gain)
        return cls(
            s.p_max, s.a_trans, s.threshold, s.restarts_per_event, s.max_runs_per_event,
            window, sb, s.m_c, s.penalty_scale, s.m_p, s.seed, s.kill_switch, s.clamp_lots,
            s.log_level,
        )


@dataclass(frozen=True)
class OrderIntent:
    pair: tuple[int, int]
    sell_leg: LegPlan
    buy_leg: LegPlan
    timestamp_ns: int
    path: CyclePath
    sell_lots: int
    buy_lots: int


class OpenList:
    """Decided pairs with their decision timestamps; at most ``capacity``."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.entries: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, pair: tuple[int, int]) -> bool:
        return pair in self.entries

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def add(self, pair: tuple[int, int], ts: int) -> None:
        if pair in self.entries:
            raise ValueError(f"duplicate open pair {pair}")
        if self.full:
            raise ValueError("open list full")
        self.entries[pair] = ts

    def remove(self, pair: tuple[int, int]) -> None:
        try:
            del self.entries[pair]
        except KeyError:
            raise UnknownPair(pair) from None

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.entries)

    def as_tabu(self, n_nodes: int) -> np.ndarray:
        t = np.zeros((n_nodes, n_nodes), dtype=np.int64)
        for short, long in self.entries:
            t[long, short] = 1
        return t


@dataclass(frozen=True)
class LogRow:
    timestamp_ns: int
    event: str
    short_code: str = ""
    long_code: str = ""
    path: str = ""
    weight_sum: float | None = None
    verdict: str = ""
    action: str = ""

    HEADER = "timestamp_ns,event,short_code,long_code,path,weight_sum,verdict,action"

    def csv(self) -> str:
        w = "" if self.weight_sum is None else repr(float(self.weight_sum))
        return (
            f"{self.timestamp_ns},{self.event},{self.short_code},{self.long_code},"
            f"{self.path},{w},{self.verdict},{self.action}"
        )


# rows kept at the "actions" level
_ACTION_EVENTS = {"E2", "E3", "E5", "E7", "E8"}


class DecisionLog:
    """In-memory decision log, optionally streamed to a CSV handle."""

    def __init__(self, level: str = "actions", sink: TextIO | None = None) -> None:
        self.level = level
        self.rows: list[LogRow] = []
        self.sink = sink
        if sink is not None:
            sink.write(LogRow.HEADER + "\n")

    def wants(self, event: str) -> bool:
        if self.level == "off":
            return False
        return self.level == "all" or event in _ACTION_EVENTS

    def add(self, row: LogRow) -> None:
        if not self.wants(row.event):
            return
        self.rows.append(row)
        if self.sink is not None:
            self.sink.write(row.csv() + "\n")


def _verdict_text(v: Verdict) -> str:
    if v.reason is None:
        return v.outcome.value
    return f"{v.outcome.value}:{v.reason.value}"


@dataclass
class Engine:
    """One trading engine over a fixed universe and similarity matrix."""

    universe: Universe
    similarity: SimilarityMatrix
    config: EngineConfig = field(default_factory=EngineConfig)
    log: DecisionLog | None = None

    def __post_init__(self) -> None:
        self.book = PriceBook(self.universe)
        self.s_nodes = self.similarity.for_universe(self.universe).node_matrix()
        self.codes = tuple(self.universe.codes)
        m = len(self.universe) + 1
        self.n_nodes = m
        self.tabu = np.zeros((m, m), dtype=np.int64)
        self.open_list = OpenList(self.config.p_max)
        self.refresh_pending = False
        self.rng = XorshiftRng(self.config.seed)
        self.lots = {s.index: lot_size(s, self.config.a_trans) for s in self.universe}
        self.w = np.zeros((m, m))
        self._dirty = True
        if self.log is None:
            self.log = DecisionLog(self.config.log_level)

    # -- market data -------------------------------------------------------

    def apply(self, ev: FeedEvent) -> bool:
        """Update the book; True if the stock's bid or ask changed."""
        if ev.code not in self.universe:
            return False
        changed = self.book.apply(ev)
        idx = self.universe.get(ev.code).index
        if ev.kind is EventKind.SESSION_OPEN:
            self.lots[idx] = lot_size(self.book.stock(idx), self.config.a_trans)
            changed = True
        if changed:
            self._update_weights(idx)
        return changed

    def _update_weights(self, k: int) -> None:
        # only row k and column k depend on stock k's quote
        nb, na = self.book.norm_bid, self.book.norm_ask
        self.w[k, :] = self.s_nodes[k, :] * (na - nb[k])
        self.w[:, k] = self.s_nodes[:, k] * (na[k] - nb)
        self.w[k, k] = 0.0

    def graph(self) -> MarketGraph:
        return MarketGraph(self.w.copy(), self.codes)

    # -- judgment and the consecutive loop ---------------------------------

    def on_feed(self, ev: FeedEvent) -> list[OrderIntent]:
        changed = self.apply(ev)
        if not changed:
            return []
        return self.decide(ev.timestamp_ns)

    def decide(self, ts: int) -> list[OrderIntent]:
        """Run the consecutive loop for the current book."""
        cfg = self.config
        if not cfg.window.may_open(ts) or cfg.kill_switch:
            why = "kill-switch" if cfg.kill_switch else "window"
            logger.debug("event at %d ignored: %s", ts, why)
            self.log.add(LogRow(ts, "E1", action=f"ignored:{why}"))
            return []
        if not self.book.complete:
            self.log.add(LogRow(ts, "E1", action="ignored:incomplete-book"))
            return []
        self.log.add(LogRow(ts, "E1", action="solve"))
        graph = MarketGraph(self.w, self.codes)
        m_p = cfg.m_p if cfg.m_p is not None else solver_penalty_weight(self.w, cfg.penalty_scale)
        intents: list[OrderIntent] = []
        accepted = 0
        for _ in range(cfg.max_runs_per_event):
            self._refresh(ts)
            problem = QuboProblem(graph, self.tabu, cfg.m_c, m_p)
            x, _energy = solve_best_of(problem, cfg.sb, self.rng, cfg.restarts_per_event)
            decoded = decode(x, graph)
            if isinstance(decoded, Violation):
                self.log.add(LogRow(ts, "E4", verdict=_verdict_text(Verdict(Outcome.INVALID, decoded)), action="none"))
                break
            verdict = evaluate(decoded, graph, self.tabu, cfg.threshold)
            short, long = decoded.pair
            row = dict(
                short_code=self.codes[short - 1],
                long_code=self.codes[long - 1],
                path=decoded.notation(graph),
                weight_sum=decoded.weight_sum,
                verdict=_verdict_text(verdict),
            )
            if not verdict.tradable:
                self.log.add(LogRow(ts, "E4", action="none", **row))
                break
            self.tabu[long, short] = 1
            reason = self._judge(decoded.pair)
            if reason is not None:
                self.log.add(LogRow(ts, "E5", action=f"tabu;reject:{reason}", **row))
                if reason == "full":
                    break
                continue
            self.open_list.add(decoded.pair, ts)
            intents.append(self._intent(decoded, ts))
            event = "E2" if accepted == 0 else "E3"
            accepted += 1
            self.log.add(LogRow(ts, event, action="tabu;open;order", **row))
        return intents

    def _judge(self, pair: tuple[int, int]) -> str | None:
        if pair in self.open_list:
            return "duplicate"
        if self.open_list.full:
            return "full"
        return None

    def _intent(self, path: CyclePath, ts: int) -> OrderIntent:
        short, long = path.pair
        qs, ql = self.book.quote(short), self.book.quote(long)
        s_ref, l_ref = self.book.stock(short), self.book.stock(long)
        s_lots, l_lots = self.lots[short], self.lots[long]
        sell = LegPlan(short, s_ref.code, s_lots * s_ref.min_lot_shares, qs.bid)
        buy = LegPlan(long, l_ref.code, l_lots * l_ref.min_lot_shares, ql.ask)
        return OrderIntent((short, long), sell, buy, ts, path, s_lots, l_lots)

    # -- closes and tabu refresh -------------------------------------------

    def on_close_confirmed(self, pair: tuple[int, int], ts: int = 0) -> None:
        self.open_list.remove(pair)
        self.refresh_pending = True
        short, long = pair
        self.log.add(
            LogRow(ts, "E7", self.codes[short - 1], self.codes[long - 1], action="remove;refresh-pending")
        )

    def _refresh(self, ts: int) -> None:
        if not self.refresh_pending:
            return
        self.tabu = self.open_list.as_tabu(self.n_nodes)
        self.refresh_pending = False
        listed = ";".join(f"{self.codes[s - 1]}-{self.codes[l - 1]}" for s, l in self.open_list.pairs())
        self.log.add(LogRow(ts, "E8", action=f"tabu:={listed or 'empty'}"))

    def tabu_pairs(self) -> set[tuple[int, int]]:
        longs, shorts = np.nonzero(self.tabu)
        return {(int(s), int(l)) for l, s in zip(longs, shorts)}


def capital_base(a_trans: Decimal, p_max: int) -> Decimal:
    return Decimal(a_trans) * p_max
