from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from sbpairs.feed import (
    EventKind,
    FeedEvent,
    MalformedRecord,
    PriceBook,
    UnknownStock,
    apply_event,
    format_feed,
    iter_feed,
    load_universe,
    parse_feed,
    write_universe,
)

from conftest import quote, universe


def test_parse_quote_record():
    ev = parse_feed("1000,8355,735.0,736.0,Q")
    assert ev == FeedEvent(1000, "8355", Decimal("735.0"), Decimal("736.0"), EventKind.QUOTE)


@pytest.mark.parametrize(
    "line",
    ["1000,8355,735.0", "1000,8355,-1,736.0,Q", "1000,8355,abc,736.0,Q", "x,8355,1,2,Q", "1000,8355,1,2,Z"],
)
def test_parse_rejects_malformed(line):
    with pytest.raises(MalformedRecord):
        parse_feed(line)


def test_format_round_trip():
    ev = parse_feed("5,AB,1.50,1.75,O")
    assert parse_feed(format_feed(ev)) == ev


def test_iter_feed_skips_comments_and_rejects_time_travel():
    lines = ["# header", "", "10,A,1,2,Q", "20,A,1,2,Q"]
    assert [e.timestamp_ns for e in iter_feed(lines)] == [10, 20]
    with pytest.raises(MalformedRecord):
        list(iter_feed(["20,A,1,2,Q", "10,A,1,2,Q"]))


def test_same_quote_twice_reports_no_change():
    book = PriceBook(universe(["A", "B"]))
    assert apply_event(book, quote(1, "A", 990, 991))
    assert not apply_event(book, quote(2, "A", 990, 991))


def test_normalization_by_base_price():
    book = PriceBook(universe(["A"], [1000]))
    book.apply(quote(1, "A", 990, 1001))
    q = book.quote(1)
    assert q.norm_bid == Decimal("0.99")
    assert q.norm_ask == Decimal("1.001")
    assert book.norm_bid[1] == 0.99


def test_unknown_stock():
    book = PriceBook(universe(["A"]))
    with pytest.raises(UnknownStock):
        book.apply(quote(1, "Z", 1, 2))


def test_session_open_sets_base_to_mid():
    book = PriceBook(universe(["A"], [1000]))
    book.apply(quote(1, "A", 1998, 2002, EventKind.SESSION_OPEN))
    assert book.stock(1).base_price == Decimal(2000)
    assert book.quote(1).norm_bid == Decimal("0.999")


def test_crossed_quote_accepted_and_flagged():
    book = PriceBook(universe(["A"]))
    book.apply(quote(1, "A", 1002, 1001))
    assert book.quote(1).crossed
    book.apply(quote(2, "A", 1001, 1001))
    assert book.quote(1).locked


def test_snapshot_is_immutable():
    book = PriceBook(universe(["A", "B"]))
    book.apply(quote(1, "A", 1, 2))
    snap = book.snapshot()
    assert not snap.complete
    book.apply(quote(2, "B", 1, 2))
    assert book.complete and not snap.complete
    with pytest.raises(ValueError):
        snap.norm_bid[1] = 5.0


def test_universe_file_round_trip(tmp_path):
    u = universe(["A", "B"], [1000, 2500])
    path = tmp_path / "u.csv"
    write_universe(u, path)
    assert load_universe(path) == u


prices = st.decimals(min_value=Decimal("0.1"), max_value=Decimal("99999"), places=1)


@given(st.lists(st.tuples(st.sampled_from(["A", "B", "C"]), prices, prices), min_size=1, max_size=40))
def test_book_is_last_writer_wins(updates):
    book = PriceBook(universe(["A", "B", "C"]))
    last = {}
    for ts, (code, bid, ask) in enumerate(updates):
        book.apply(FeedEvent(ts, code, bid, ask))
        last[code] = (bid, ask)
    for code, (bid, ask) in last.items():
        q = book.quote(book.universe.get(code).index)
        assert (q.bid, q.ask) == (bid, ask)


@given(prices, st.decimals(min_value=Decimal("1"), max_value=Decimal("50000"), places=0))
def test_normalization_is_exact(bid, base):
    book = PriceBook(universe(["A"], [base]))
    book.apply(FeedEvent(0, "A", bid, bid + 1))
    # 28 significant digits, rounded back to the price's own scale
    assert (book.quote(1).norm_bid * base).quantize(bid) == bid
