"""Market feed records, the stock universe and the best bid/ask price book.

Prices are carried as :class:`decimal.Decimal` end to end so that money
arithmetic downstream (lot sizing, fills, P&L) is exact.  The book also keeps
float64 mirrors of the normalized quotes because the market graph and the
solver work in binary floating point anyway.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)


class MalformedRecord(ValueError):
    """A feed, universe or similarity record that cannot be parsed."""


class UnknownStock(LookupError):
    """A record refers to a stock code outside the universe."""


class IncompleteBook(ValueError):
    """Some universe stock has never been quoted."""


class EventKind(Enum):
    QUOTE = "Q"
    SESSION_OPEN = "O"
    SESSION_CLOSE = "C"


@dataclass(frozen=True, slots=True)
class StockRef:
    index: int
    code: str
    min_lot_shares: int
    base_price: Decimal

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"stock index must be >= 1, got {self.index}")
        if self.min_lot_shares < 1:
            raise ValueError(f"{self.code}: min_lot_shares must be >= 1")
        if not self.base_price > 0:
            raise ValueError(f"{self.code}: base_price must be positive")


@dataclass(frozen=True, slots=True)
class Quote:
    bid: Decimal
    ask: Decimal
    norm_bid: Decimal
    norm_ask: Decimal

    @classmethod
    def build(cls, bid: Decimal, ask: Decimal, base_price: Decimal) -> "Quote":
        return cls(bid, ask, bid / base_price, ask / base_price)

    @property
    def crossed(self) -> bool:
        return self.bid > self.ask

    @property
    def locked(self) -> bool:
        return self.bid == self.ask


@dataclass(frozen=True, slots=True)
class FeedEvent:
    timestamp_ns: int
    code: str
    bid: Decimal
    ask: Decimal
    kind: EventKind = EventKind.QUOTE


_KINDS = {k.value: k for k in EventKind}


def _price(text: str, what: str, line: str) -> Decimal:
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise MalformedRecord(f"non-numeric {what} in {line!r}") from None
    if not value.is_finite():
        raise MalformedRecord(f"non-finite {what} in {line!r}")
    if value < 0:
        raise MalformedRecord(f"negative {what} in {line!r}")
    return value


def parse_feed(line: str) -> FeedEvent:
    """Parse one ``timestamp_ns,stock_code,bid,ask,kind`` record."""
    parts = line.strip().split(",")
    if len(parts) != 5:
        raise MalformedRecord(f"expected 5 fields, got {len(parts)}: {line!r}")
    ts_text, code, bid_text, ask_text, kind_text = (p.strip() for p in parts)
    try:
        ts = int(ts_text)
    except ValueError:
        raise MalformedRecord(f"bad timestamp in {line!r}") from None
    if not code:
        raise MalformedRecord(f"empty stock code in {line!r}")
    kind = _KINDS.get(kind_text)
    if kind is None:
        raise MalformedRecord(f"unknown record kind {kind_text!r} in {line!r}")
    return FeedEvent(ts, code, _price(bid_text, "bid", line), _price(ask_text, "ask", line), kind)


def format_feed(ev: FeedEvent) -> str:
    return f"{ev.timestamp_ns},{ev.code},{ev.bid},{ev.ask},{ev.kind.value}"


def iter_feed(lines: Iterable[str], source: str = "<feed>") -> Iterator[FeedEvent]:
    """Parse feed lines, skipping blanks and ``#`` comments.

    Raises MalformedRecord (with the line number) on bad records or when
    timestamps go backwards.
    """
    last_ts = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            ev = parse_feed(line)
        except MalformedRecord as exc:
            raise MalformedRecord(f"{source}:{lineno}: {exc}") from None
        if last_ts is not None and ev.timestamp_ns < last_ts:
            raise MalformedRecord(f"{source}:{lineno}: timestamp goes backwards")
        last_ts = ev.timestamp_ns
        yield ev


def read_feed(path: str | Path) -> Iterator[FeedEvent]:
    with open(path, encoding="utf-8") as fh:
        yield from iter_feed(fh, str(path))


@dataclass(frozen=True)
class Universe:
    """The N tradable stocks, indexed 1..N in file order."""

    stocks: tuple[StockRef, ...]
    _by_code: dict[str, StockRef] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        by_code = {}
        for pos, s in enumerate(self.stocks, 1):
            if s.index != pos:
                raise ValueError("stock indices must run 1..N in order")
            if s.code in by_code:
                raise ValueError(f"duplicate stock code {s.code}")
            by_code[s.code] = s
        object.__setattr__(self, "_by_code", by_code)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, int, Decimal]]) -> "Universe":
        return cls(tuple(StockRef(i, c, lot, bp) for i, (c, lot, bp) in enumerate(rows, 1)))

    def __len__(self) -> int:
        return len(self.stocks)

    def __iter__(self) -> Iterator[StockRef]:
        return iter(self.stocks)

    @property
    def codes(self) -> list[str]:
        return [s.code for s in self.stocks]

    def get(self, code: str) -> StockRef:
        try:
            return self._by_code[code]
        except KeyError:
            raise UnknownStock(code) from None

    def __contains__(self, code: str) -> bool:
        return code in self._by_code

    def stock(self, index: int) -> StockRef:
        return self.stocks[index - 1]


def load_universe(path: str | Path) -> Universe:
    """Read ``stock_code,min_lot_shares,base_price`` rows (header optional)."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or rec[0].startswith("#"):
                continue
            if lineno == 1 and rec[0].strip() == "stock_code":
                continue
            if len(rec) != 3:
                raise MalformedRecord(f"{path}:{lineno}: expected 3 fields")
            code, lot_text, base_text = (r.strip() for r in rec)
            try:
                lot = int(lot_text)
            except ValueError:
                raise MalformedRecord(f"{path}:{lineno}: bad min_lot_shares") from None
            base = _price(base_text, "base_price", ",".join(rec))
            if lot < 1 or base == 0:
                raise MalformedRecord(f"{path}:{lineno}: lot and base price must be positive")
            rows.append((code, lot, base))
    if not rows:
        raise MalformedRecord(f"{path}: empty universe")
    return Universe.from_rows(rows)


def write_universe(universe: Universe, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("stock_code,min_lot_shares,base_price\n")
        for s in universe:
            fh.write(f"{s.code},{s.min_lot_shares},{s.base_price}\n")


@dataclass(frozen=True)
class BookSnapshot:
    """Immutable view of the book; safe to hand to other threads."""

    stocks: tuple[StockRef, ...]
    quotes: tuple[Quote | None, ...]
    norm_bid: np.ndarray
    norm_ask: np.ndarray

    def quote(self, index: int) -> Quote:
        q = self.quotes[index - 1]
        if q is None:
            raise IncompleteBook(f"stock {self.stocks[index - 1].code} never quoted")
        return q

    @property
    def complete(self) -> bool:
        return all(q is not None for q in self.quotes)


class PriceBook:
    """Best bid/ask per stock; single writer, last writer wins.

    ``norm_bid``/``norm_ask`` are float64 mirrors indexed by node number
    (slot 0 is the dummy node and stays zero).
    """

    def __init__(self, universe: Universe) -> None:
        self.universe = universe
        self.stocks: list[StockRef] = list(universe.stocks)
        self.quotes: list[Quote | None] = [None] * len(universe)
        self.norm_bid = np.zeros(len(universe) + 1)
        self.norm_ask = np.zeros(len(universe) + 1)
        self._missing = len(universe)

    @property
    def complete(self) -> bool:
        return self._missing == 0

    def quote(self, index: int) -> Quote | None:
        return self.quotes[index - 1]

    def stock(self, index: int) -> StockRef:
        return self.stocks[index - 1]

    def set_base_price(self, index: int, base_price: Decimal) -> None:
        s = self.stocks[index - 1]
        self.stocks[index - 1] = replace(s, base_price=base_price)
        q = self.quotes[index - 1]
        if q is not None:
            self._store(index, Quote.build(q.bid, q.ask, base_price))

    def _store(self, index: int, q: Quote) -> None:
        if self.quotes[index - 1] is None:
            self._missing -= 1
        self.quotes[index - 1] = q
        self.norm_bid[index] = float(q.norm_bid)
        self.norm_ask[index] = float(q.norm_ask)

    def apply(self, ev: FeedEvent) -> bool:
        """Apply one event and report whether bid or ask actually changed.

        A session-open record also resets the stock's base price for the
        day to the record's mid price.
        """
        s = self.universe.get(ev.code)
        if ev.kind is EventKind.SESSION_OPEN:
            mid = (ev.bid + ev.ask) / 2
            if mid > 0:
                self.stocks[s.index - 1] = replace(self.stocks[s.index - 1], base_price=mid)
        old = self.quotes[s.index - 1]
        base = self.stocks[s.index - 1].base_price
        if old is not None and old.bid == ev.bid and old.ask == ev.ask:
            if ev.kind is EventKind.SESSION_OPEN:
                self._store(s.index, Quote.build(ev.bid, ev.ask, base))
            return False
        q = Quote.build(ev.bid, ev.ask, base)
        if q.crossed or q.locked:
            logger.debug("crossed/locked quote for %s at %d", ev.code, ev.timestamp_ns)
        self._store(s.index, q)
        return True

    def snapshot(self) -> BookSnapshot:
        nb = self.norm_bid.copy()
        na = self.norm_ask.copy()
        nb.flags.writeable = False
        na.flags.writeable = False
        return BookSnapshot(tuple(self.stocks), tuple(self.quotes), nb, na)


def apply_event(book: PriceBook, ev: FeedEvent) -> bool:
    return book.apply(ev)
