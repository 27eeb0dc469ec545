"""Pair-position lifecycle: closed -> opening -> opened -> closing -> closed.

Transitions

    T1  closed  -> opening   first leg result (fill or lapse) of the open orders
    T2  opening -> opening   any report while an open leg is still outstanding
    T3  opening -> opened    both legs filled at their limit prices
    T4  opening -> closing   a lapse or an off-price fill; filled legs are flattened
    T5  opened  -> closing   close condition met (profit or end-of-day unwind)
    T6  closing -> closing   any report while the pair is not yet flat
    T7  closing -> closed    flat again; a close confirmation is emitted

Money is Decimal throughout; shares are integers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Callable, Iterable

from .feed import BookSnapshot, PriceBook


class OrphanReport(LookupError):
    """An execution report that matches no emitted order."""


class PositionState(Enum):
    CLOSED = "closed"
    OPENING = "opening"
    OPENED = "opened"
    CLOSING = "closing"


class Transition(Enum):
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"
    T6 = "T6"
    T7 = "T7"


class Side(Enum):
    SELL = "sell"
    BUY = "buy"


class ReportKind(Enum):
    ACK = "ack"
    FILL = "fill"
    LAPSE = "lapse"


SHORT, LONG = "short", "long"


@dataclass(frozen=True)
class Order:
    order_id: int
    pair: tuple[int, int]
    leg: str
    side: Side
    stock: int
    code: str
    shares: int
    limit: Decimal
    purpose: str
    timestamp_ns: int


@dataclass(frozen=True)
class ExecutionReport:
    order_id: int
    kind: ReportKind
    price: Decimal | None
    timestamp_ns: int

    @property
    def is_result(self) -> bool:
        return self.kind is not ReportKind.ACK


@dataclass(frozen=True)
class Fill:
    leg: str
    side: Side
    price: Decimal
    shares: int
    timestamp_ns: int

    @property
    def amount(self) -> Decimal:
        return self.price * self.shares

    @property
    def signed_cash(self) -> Decimal:
        return self.amount if self.side is Side.SELL else -self.amount


@dataclass(frozen=True)
class LegPlan:
    """What one leg should hold once opened."""

    stock: int
    code: str
    shares: int
    limit: Decimal


@dataclass(frozen=True)
class CloseConfirmation:
    pair: tuple[int, int]
    timestamp_ns: int


@dataclass(frozen=True)
class LedgerRow:
    pair: str
    open_ts: int
    close_ts: int
    open_profit_basis: Decimal
    realized_pnl: Decimal
    commission: Decimal

    HEADER = "pair,open_ts,close_ts,open_profit_basis,realized_pnl,commission"

    def csv(self) -> str:
        return (
            f"{self.pair},{self.open_ts},{self.close_ts},{self.open_profit_basis},"
            f"{self.realized_pnl},{self.commission}"
        )


@dataclass
class PairPosition:
    pair: tuple[int, int]
    state: PositionState = PositionState.CLOSED
    plan: dict[str, LegPlan] = field(default_factory=dict)
    fills: list[Fill] = field(default_factory=list)
    pending: dict[int, Order] = field(default_factory=dict)
    results: dict[str, ReportKind] = field(default_factory=dict)
    unintended: bool = False
    relapse: set[str] = field(default_factory=set)
    open_ts: int | None = None
    close_ts: int | None = None
    history: list[Transition] = field(default_factory=list)
    commission: Decimal = Decimal(0)

    # -- holdings ----------------------------------------------------------

    def net_shares(self, leg: str) -> int:
        """Signed holding of a leg: short legs go negative."""
        total = 0
        for f in self.fills:
            if f.leg == leg:
                total += f.shares if f.side is Side.BUY else -f.shares
        return total

    @property
    def flat(self) -> bool:
        return self.net_shares(SHORT) == 0 and self.net_shares(LONG) == 0

    def open_fill(self, leg: str) -> Fill | None:
        side = Side.SELL if leg == SHORT else Side.BUY
        for f in self.fills:
            if f.leg == leg and f.side is side:
                return f
        return None

    @property
    def open_value(self) -> Decimal:
        return sum((f.amount for f in (self.open_fill(SHORT), self.open_fill(LONG)) if f), Decimal(0))

    @property
    def realized_pnl(self) -> Decimal:
        """Cash in minus cash out, net of commission."""
        return sum((f.signed_cash for f in self.fills), Decimal(0)) - self.commission

    def mark_to_market(self, book: BookSnapshot | PriceBook) -> Decimal:
        """(open bid - ask now) * shares on the short leg plus
        (bid now - open ask) * shares on the long leg."""
        s = self.open_fill(SHORT)
        lg = self.open_fill(LONG)
        q_short = book.quote(self.plan[SHORT].stock)
        q_long = book.quote(self.plan[LONG].stock)
        return (s.price - q_short.ask) * s.shares + (q_long.bid - lg.price) * lg.shares

    def _move(self, to: PositionState, t: Transition) -> None:
        self.state = to
        self.history.append(t)

    def reset(self) -> None:
        self.state = PositionState.CLOSED
        self.plan = {}
        self.fills = []
        self.pending = {}
        self.results = {}
        self.unintended = False
        self.relapse = set()
        self.open_ts = None
        self.close_ts = None
        self.commission = Decimal(0)


class PositionBook:
    """All pair state machines plus the order registry.

    The caller owns timing: it submits orders returned here to an executor
    and feeds the resulting reports back through :meth:`on_execution`.
    Completed round trips land in ``ledger``; close confirmations are pushed
    to ``on_confirm``.
    """

    def __init__(
        self,
        commission_rate: Decimal = Decimal("0.0005"),
        close_margin: Decimal = Decimal(0),
        on_confirm: Callable[[CloseConfirmation], None] | None = None,
        label: Callable[[int], str] = str,
    ) -> None:
        if not Decimal(0) <= commission_rate < 1:
            raise ValueError("commission_rate must lie in [0, 1)")
        self.commission_rate = Decimal(commission_rate)
        self.close_margin = Decimal(close_margin)
        self.on_confirm = on_confirm
        self.label = label
        self.positions: dict[tuple[int, int], PairPosition] = {}
        self.orders: dict[int, Order] = {}
        self.ledger: list[LedgerRow] = []
        self.confirmations: list[CloseConfirmation] = []
        self._ids = itertools.count(1)

    def position(self, pair: tuple[int, int]) -> PairPosition:
        pos = self.positions.get(pair)
        if pos is None:
            pos = self.positions[pair] = PairPosition(pair)
        return pos

    def active(self) -> list[PairPosition]:
        return [p for p in self.positions.values() if p.state is not PositionState.CLOSED or p.pending]

    def _order(self, pos, leg, side, plan, shares, limit, purpose, ts) -> Order:
        o = Order(next(self._ids), pos.pair, leg, side, plan.stock, plan.code, shares, limit, purpose, ts)
        self.orders[o.order_id] = o
        pos.pending[o.order_id] = o
        return o

    # -- opening -----------------------------------------------------------

    def open(self, pair: tuple[int, int], short: LegPlan, long: LegPlan, ts: int) -> list[Order]:
        """Emit the two opening orders for a closed pair."""
        pos = self.position(pair)
        if pos.state is not PositionState.CLOSED or pos.pending:
            raise ValueError(f"pair {pair} is not closed")
        pos.reset()
        pos.plan = {SHORT: short, LONG: long}
        pos.open_ts = ts
        return [
            self._order(pos, SHORT, Side.SELL, short, short.shares, short.limit, "open", ts),
            self._order(pos, LONG, Side.BUY, long, long.shares, long.limit, "open", ts),
        ]

    def on_execution(self, report: ExecutionReport, book: BookSnapshot | PriceBook | None = None) -> list[Order]:
        """Apply one report; returns any follow-up (closing) orders."""
        order = self.orders.get(report.order_id)
        if order is None:
            raise OrphanReport(f"no order {report.order_id}")
        pos = self.positions[order.pair]
        if report.order_id not in pos.pending:
            return []  # already settled: a no-op duplicate
        if report.is_result:
            del pos.pending[report.order_id]
            if report.kind is ReportKind.FILL:
                price = report.price if report.price is not None else order.limit
                pos.fills.append(Fill(order.leg, order.side, price, order.shares, report.timestamp_ns))
                pos.commission += self.commission_rate * price * order.shares
        if order.purpose == "open":
            return self._opening(pos, order, report, book)
        return self._closing_progress(pos, order, report, book)

    def _opening(self, pos, order, report, book) -> list[Order]:
        if pos.state is PositionState.CLOSED:
            if not report.is_result:
                return []
            pos._move(PositionState.OPENING, Transition.T1)
        elif pos.state is PositionState.OPENING and (not report.is_result or pos.pending):
            pos._move(PositionState.OPENING, Transition.T2)
        if report.is_result:
            pos.results[order.leg] = report.kind
            if report.kind is ReportKind.LAPSE or (
                report.price is not None and report.price != order.limit
            ):
                pos.unintended = True
        if pos.state is not PositionState.OPENING or len(pos.results) < 2:
            return []
        if not pos.unintended:
            pos._move(PositionState.OPENED, Transition.T3)
            return []
        pos._move(PositionState.CLOSING, Transition.T4)
        return self._flatten(pos, book, report.timestamp_ns)

    # -- closing -----------------------------------------------------------

    def close_threshold(self, pos: PairPosition, book: BookSnapshot | PriceBook) -> Decimal:
        """Commission already paid plus the commission closing now would
        cost, plus the configured margin: the mark-to-market profit must
        clear this to close at a net gain of at least the margin."""
        q_short = book.quote(pos.plan[SHORT].stock)
        q_long = book.quote(pos.plan[LONG].stock)
        close_amount = q_short.ask * pos.net_shares(SHORT) * -1 + q_long.bid * pos.net_shares(LONG)
        return pos.commission + self.commission_rate * close_amount + self.close_margin

    def check_close(self, pos: PairPosition, book: BookSnapshot | PriceBook, unwind: bool = False) -> bool:
        if pos.state is not PositionState.OPENED:
            return False
        if unwind:
            return True
        return pos.mark_to_market(book) >= self.close_threshold(pos, book)

    def close(self, pos: PairPosition, book: BookSnapshot | PriceBook, ts: int) -> list[Order]:
        """T5: start closing an opened pair at marketable prices."""
        if pos.state is not PositionState.OPENED:
            raise ValueError(f"pair {pos.pair} is not opened")
        pos._move(PositionState.CLOSING, Transition.T5)
        return self._flatten(pos, book, ts)

    def _flatten(self, pos: PairPosition, book, ts: int) -> list[Order]:
        orders = []
        for leg in (SHORT, LONG):
            held = pos.net_shares(leg)
            if held == 0 or any(o.leg == leg for o in pos.pending.values()):
                continue
            plan = pos.plan[leg]
            q = book.quote(plan.stock) if book is not None else None
            if held < 0:
                limit = q.ask if q is not None else plan.limit
                orders.append(self._order(pos, leg, Side.BUY, plan, -held, limit, "close", ts))
            else:
                limit = q.bid if q is not None else plan.limit
                orders.append(self._order(pos, leg, Side.SELL, plan, held, limit, "close", ts))
        if not orders and not pos.pending and pos.flat:
            self._finish(pos, ts)
        return orders

    def _closing_progress(self, pos, order, report, book) -> list[Order]:
        if pos.state is not PositionState.CLOSING:
            return []
        if report.kind is ReportKind.LAPSE:
            pos.relapse.add(order.leg)
        if pos.flat and not pos.pending:
            self._finish(pos, report.timestamp_ns)
            return []
        pos._move(PositionState.CLOSING, Transition.T6)
        return []

    def reorder(self, pos: PairPosition, book: BookSnapshot | PriceBook, ts: int) -> list[Order]:
        """Re-issue close orders for legs whose last close order lapsed."""
        if pos.state is not PositionState.CLOSING or not pos.relapse:
            return []
        pos.relapse.clear()
        return self._flatten(pos, book, ts)

    def _finish(self, pos: PairPosition, ts: int) -> None:
        pos.close_ts = ts
        pos._move(PositionState.CLOSED, Transition.T7)
        if pos.fills:
            s, lg = pos.plan[SHORT], pos.plan[LONG]
            self.ledger.append(
                LedgerRow(
                    f"{s.code}-{lg.code}",
                    pos.open_ts,
                    ts,
                    pos.open_value,
                    pos.realized_pnl,
                    pos.commission,
                )
            )
        confirm = CloseConfirmation(pos.pair, ts)
        self.confirmations.append(confirm)
        if self.on_confirm is not None:
            self.on_confirm(confirm)

    # -- bulk helpers --------------------------------------------------------

    def opened(self) -> list[PairPosition]:
        return [p for p in self.positions.values() if p.state is PositionState.OPENED]

    def closing(self) -> list[PairPosition]:
        return [p for p in self.positions.values() if p.state is PositionState.CLOSING]

    def touching(self, stock: int) -> Iterable[PairPosition]:
        for p in self.positions.values():
            if p.state is PositionState.OPENED and stock in (p.plan[SHORT].stock, p.plan[LONG].stock):
                yield p
