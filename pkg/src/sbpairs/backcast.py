"""Deterministic replay of feed files through the engine and position book.

Orders fill at their limit prices (``always``), or each order independently
lapses with probability p (``lapse``).  Fills and reports are delivered
synchronously within the event that produced the order.  At the end of each
day every remaining position is flattened at the last quotes with fills
forced, so no inventory is carried overnight.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
import time
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import Settings
from .engine import DecisionLog, Engine, EngineConfig, LogRow, OrderIntent, tradable_universe
from .feed import EventKind, FeedEvent, Universe
from .marketgraph import NS_PER_DAY, SimilarityMatrix
from .positions import (
    SHORT,
    LONG,
    ExecutionReport,
    Fill,
    LedgerRow,
    Order,
    PositionBook,
    PositionState,
    ReportKind,
    Transition,
)


class IncompleteRoundTrip(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


# -- accounting -------------------------------------------------------------


def pnl_round_trip(
    open_fills: Sequence[Fill],
    close_fills: Sequence[Fill],
    commission_rate: Decimal,
) -> Decimal:
    """(open bid - close ask) x short shares + (close bid - open ask) x long
    shares, minus commission on all four transaction amounts."""
    legs = {}
    for f in open_fills:
        legs[("open", f.leg)] = f
    for f in close_fills:
        legs[("close", f.leg)] = f
    need = [("open", SHORT), ("open", LONG), ("close", SHORT), ("close", LONG)]
    missing = [f"{a} {b}" for a, b in need if (a, b) not in legs]
    if missing or len(open_fills) != 2 or len(close_fills) != 2:
        raise IncompleteRoundTrip(f"missing legs: {', '.join(missing) or 'duplicate fills'}")
    os_, ol = legs[("open", SHORT)], legs[("open", LONG)]
    cs, cl = legs[("close", SHORT)], legs[("close", LONG)]
    gross = (os_.price - cs.price) * os_.shares + (cl.price - ol.price) * ol.shares
    amount = os_.amount + ol.amount + cs.amount + cl.amount
    return gross - Decimal(commission_rate) * amount


@dataclass(frozen=True)
class PerformanceStats:
    annual_return: float
    risk: float
    sharpe: float
    sharpe_flag: str
    n_days: int


def performance_stats(
    daily_pnl: Sequence[Decimal | float],
    capital: Decimal | float,
    trading_days: int = 245,
) -> PerformanceStats:
    """Annualized mean and sample standard deviation of daily returns.

    ``sharpe_flag`` is ``ok``, ``undefined`` (zero mean and zero spread,
    sharpe reported as 0) or ``infinite`` (zero spread, sharpe +-inf).
    """
    if len(daily_pnl) < 2:
        raise InsufficientData("need at least two daily values")
    if not float(capital) > 0:
        raise ValueError("capital must be positive")
    r = np.array([float(p) for p in daily_pnl]) / float(capital)
    mean = math.fsum(r.tolist()) / len(r)
    var = math.fsum(((r - mean) ** 2).tolist()) / (len(r) - 1)
    ann = mean * trading_days
    risk = math.sqrt(var) * math.sqrt(trading_days)
    if risk == 0.0:
        if ann == 0.0:
            return PerformanceStats(ann, 0.0, 0.0, "undefined", len(r))
        return PerformanceStats(ann, 0.0, math.copysign(math.inf, ann), "infinite", len(r))
    return PerformanceStats(ann, risk, ann / risk, "ok", len(r))


# -- simulation -------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    commission_rate: Decimal = Decimal("0.0005")
    close_margin: Decimal = Decimal(0)
    fill_model: str = "always"
    lapse_probability: float = 0.0
    seed: int = 1
    trading_days: int = 245
    capital: Decimal | None = None

    def __post_init__(self) -> None:
        if not Decimal(0) <= Decimal(self.commission_rate) < 1:
            raise ValueError("commission_rate must lie in [0, 1)")
        if self.fill_model not in ("always", "lapse"):
            raise ValueError("fill_model must be 'always' or 'lapse'")
        if not 0.0 <= self.lapse_probability <= 1.0:
            raise ValueError("lapse probability must lie in [0, 1]")

    @classmethod
    def from_settings(cls, s: Settings, seed: int | None = None) -> "SimConfig":
        return cls(
            s.commission_rate, s.close_margin, s.fill_model, s.lapse_probability,
            s.seed if seed is None else seed, s.trading_days, s.capital_base,
        )


@dataclass
class DailyReport:
    date: str
    transaction_amount: Decimal = Decimal(0)
    realized_pnl: Decimal = Decimal(0)
    opens: int = 0
    closes: int = 0
    cum_transaction_amount: Decimal = Decimal(0)
    cum_realized_pnl: Decimal = Decimal(0)

    HEADER = "date,transaction_amount,realized_pnl,opens,closes,cum_transaction_amount,cum_realized_pnl"

    def csv(self) -> str:
        return (
            f"{self.date},{self.transaction_amount},{self.realized_pnl},{self.opens},{self.closes},"
            f"{self.cum_transaction_amount},{self.cum_realized_pnl}"
        )


LATENCY_BUCKETS_US = (10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000)


@dataclass
class LatencyHistogram:
    """Wall-clock time per decision (one engine.decide call), microseconds."""

    counts: list[int] = field(default_factory=lambda: [0] * (len(LATENCY_BUCKETS_US) + 1))
    total_ns: int = 0
    n: int = 0
    max_ns: int = 0

    def add(self, ns: int) -> None:
        self.counts[bisect_right(LATENCY_BUCKETS_US, ns / 1000.0)] += 1
        self.total_ns += ns
        self.n += 1
        self.max_ns = max(self.max_ns, ns)

    def rows(self) -> list[str]:
        out = ["upper_us,count"]
        for b, c in zip(LATENCY_BUCKETS_US, self.counts):
            out.append(f"{b},{c}")
        out.append(f"inf,{self.counts[-1]}")
        return out

    def summary(self) -> dict:
        mean = self.total_ns / self.n / 1000.0 if self.n else 0.0
        return {"decisions": self.n, "mean_us": mean, "max_us": self.max_ns / 1000.0}


@dataclass
class BackcastResult:
    reports: list[DailyReport]
    positions: PositionBook
    log: DecisionLog
    engine: Engine
    stats: PerformanceStats | None
    orders: int
    fills: int
    events: int
    latency: LatencyHistogram | None

    @property
    def fill_rate(self) -> float:
        return self.fills / self.orders if self.orders else 0.0

    def summary(self) -> dict:
        cum = self.reports[-1].cum_realized_pnl if self.reports else Decimal(0)
        tx = self.reports[-1].cum_transaction_amount if self.reports else Decimal(0)
        st = self.stats
        return {
            "days": len(self.reports),
            "events": self.events,
            "round_trips": len(self.positions.ledger),
            "orders": self.orders,
            "fills": self.fills,
            "fill_rate": self.fill_rate,
            "cum_transaction_amount": str(tx),
            "cum_realized_pnl": str(cum),
            "annualized_return": None if st is None else _json_float(st.annual_return),
            "risk": None if st is None else _json_float(st.risk),
            "sharpe": None if st is None else _json_float(st.sharpe),
            "sharpe_flag": "insufficient-data" if st is None else st.sharpe_flag,
        }


def _json_float(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def day_label(ts: int) -> str:
    return (_dt.date(1970, 1, 1) + _dt.timedelta(days=ts // NS_PER_DAY)).isoformat()


class _Simulator:
    def __init__(self, engine: Engine, positions: PositionBook, cfg: SimConfig) -> None:
        self.engine = engine
        self.positions = positions
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.orders = 0
        self.fills = 0
        self.day: DailyReport | None = None

    def execute(self, orders: list[Order], ts: int, force: bool = False) -> None:
        queue = list(orders)
        while queue:
            order = queue.pop(0)
            self.orders += 1
            follow = self.positions.on_execution(
                ExecutionReport(order.order_id, ReportKind.ACK, None, ts), self.engine.book
            )
            queue.extend(follow)
            lapse = (
                not force
                and self.cfg.fill_model == "lapse"
                and self.rng.random() < self.cfg.lapse_probability
            )
            if lapse:
                report = ExecutionReport(order.order_id, ReportKind.LAPSE, None, ts)
            else:
                report = ExecutionReport(order.order_id, ReportKind.FILL, order.limit, ts)
                self.fills += 1
                if self.day is not None:
                    self.day.transaction_amount += order.limit * order.shares
            queue.extend(self.positions.on_execution(report, self.engine.book))

    def open(self, intent: OrderIntent) -> None:
        orders = self.positions.open(intent.pair, intent.sell_leg, intent.buy_leg, intent.timestamp_ns)
        if self.day is not None:
            self.day.opens += 1
        self.execute(orders, intent.timestamp_ns)

    def manage(self, ts: int, stock: int | None, force: bool = False) -> None:
        """Close checks and re-orders after a book update."""
        window = self.engine.config.window
        unwind = force or window.must_unwind(ts)
        for pos in list(self.positions.closing()):
            self.execute(self.positions.reorder(pos, self.engine.book, ts), ts, force)
        if unwind:
            candidates = self.positions.opened()
        elif stock is not None:
            candidates = list(self.positions.touching(stock))
        else:
            candidates = []
        for pos in candidates:
            if self.positions.check_close(pos, self.engine.book, unwind):
                self.execute(self.positions.close(pos, self.engine.book, ts), ts, force)

    def flatten(self, ts: int) -> None:
        """Force every position flat; reorders repeat until nothing is left."""
        for _ in range(4):
            self.manage(ts, None, force=True)
            if not any(p.state is not PositionState.CLOSED for p in self.positions.positions.values()):
                return
        raise RuntimeError("positions failed to flatten")


def run_backcast(
    events: Iterable[FeedEvent],
    universe: Universe,
    similarity: SimilarityMatrix,
    engine_config: EngineConfig | None = None,
    sim_config: SimConfig | None = None,
    log: DecisionLog | None = None,
    measure_latency: bool = False,
) -> BackcastResult:
    ecfg = engine_config or EngineConfig()
    scfg = sim_config or SimConfig()
    uni, _dropped = tradable_universe(universe, ecfg.a_trans, ecfg.clamp_lots)
    engine = Engine(uni, similarity, ecfg, log)
    positions = PositionBook(
        Decimal(scfg.commission_rate),
        Decimal(scfg.close_margin),
        on_confirm=lambda c: engine.on_close_confirmed(c.pair, c.timestamp_ns),
    )
    sim = _Simulator(engine, positions, scfg)
    latency = LatencyHistogram() if measure_latency else None
    reports: list[DailyReport] = []
    ledger_seen = 0
    last_ts = None
    n_events = 0
    current_day = None

    def finish_day(ts: int) -> None:
        nonlocal ledger_seen
        sim.flatten(ts)
        rep = sim.day
        new_rows = positions.ledger[ledger_seen:]
        ledger_seen = len(positions.ledger)
        rep.closes = len(new_rows)
        rep.realized_pnl = sum((r.realized_pnl for r in new_rows), Decimal(0))
        prev = reports[-1] if reports else None
        rep.cum_transaction_amount = (prev.cum_transaction_amount if prev else Decimal(0)) + rep.transaction_amount
        rep.cum_realized_pnl = (prev.cum_realized_pnl if prev else Decimal(0)) + rep.realized_pnl
        reports.append(rep)

    for ev in events:
        n_events += 1
        day = ev.timestamp_ns // NS_PER_DAY
        if day != current_day:
            if current_day is not None:
                finish_day(last_ts)
            current_day = day
            sim.day = DailyReport(day_label(ev.timestamp_ns))
        last_ts = ev.timestamp_ns
        if ev.code not in uni:
            continue
        changed = engine.apply(ev)
        stock = uni.get(ev.code).index
        if not changed:
            if positions.closing() or (engine.config.window.must_unwind(ev.timestamp_ns) and positions.opened()):
                sim.manage(ev.timestamp_ns, None)
            continue
        sim.manage(ev.timestamp_ns, stock)
        if ev.kind is EventKind.SESSION_CLOSE:
            continue
        if latency is not None:
            t0 = time.perf_counter_ns()
            intents = engine.decide(ev.timestamp_ns)
            latency.add(time.perf_counter_ns() - t0)
        else:
            intents = engine.decide(ev.timestamp_ns)
        for intent in intents:
            sim.open(intent)
    if current_day is not None:
        finish_day(last_ts)

    stats = None
    if len(reports) >= 2:
        capital = scfg.capital if scfg.capital is not None else ecfg.a_trans * ecfg.p_max
        stats = performance_stats([r.realized_pnl for r in reports], capital, scfg.trading_days)
    return BackcastResult(reports, positions, engine.log, engine, stats, sim.orders, sim.fills, n_events, latency)


def write_outputs(result: BackcastResult, out_dir: str | Path) -> list[Path]:
    """daily.csv, ledger.csv, decisions.csv, summary.json (+ latency.csv)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, lines: list[str]) -> None:
        p = out / name
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(p)

    put("daily.csv", [DailyReport.HEADER] + [r.csv() for r in result.reports])
    put("ledger.csv", [LedgerRow.HEADER] + [r.csv() for r in result.positions.ledger])
    put("decisions.csv", [LogRow.HEADER] + [r.csv() for r in result.log.rows])
    p = out / "summary.json"
    p.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(p)
    if result.latency is not None:
        put("latency.csv", result.latency.rows())
        p = out / "latency.json"
        p.write_text(json.dumps(result.latency.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(p)
    return written


def transition_counts(positions: PositionBook) -> dict[Transition, int]:
    counts: dict[Transition, int] = defaultdict(int)
    for p in positions.positions.values():
        for t in p.history:
            counts[t] += 1
    return dict(counts)


# -- synthetic feeds --------------------------------------------------------


@dataclass(frozen=True)
class StockSpec:
    code: str
    price: Decimal
    vol: float = 0.01
    block: int = 0
    min_lot: int = 100


@dataclass(frozen=True)
class Shock:
    """Shift one stock's log price by ``magnitude`` for ``duration_s`` seconds."""

    day: int
    at_s: float
    code: str
    magnitude: float
    duration_s: float = 600.0


@dataclass(frozen=True)
class MarketSpec:
    """Synthetic market: ``vol`` is the daily log-return standard deviation,
    ``rho`` the share of variance explained by the stock's block factor;
    event times are spread evenly over the session."""

    stocks: tuple[StockSpec, ...]
    days: int = 1
    events_per_day: int = 1000
    start_date: str = "2024-01-04"
    session_open_s: int = 9 * 3600
    session_close_s: int = 15 * 3600
    tick: Decimal = Decimal(1)
    spread_ticks: int = 1
    rho: float = 0.8
    shocks: tuple[Shock, ...] = ()
    force_change: bool = False

    def validate(self) -> None:
        if not self.stocks:
            raise InvalidSpec("no stocks")
        codes = [s.code for s in self.stocks]
        if len(set(codes)) != len(codes):
            raise InvalidSpec("duplicate stock codes")
        if any(not s.price > 0 or s.vol < 0 or s.min_lot < 1 for s in self.stocks):
            raise InvalidSpec("prices and lots must be positive, volatilities non-negative")
        if self.days < 1 or self.events_per_day < 0:
            raise InvalidSpec("days must be >= 1 and events_per_day >= 0")
        if not 0 <= self.session_open_s < self.session_close_s <= 86_400:
            raise InvalidSpec("bad session times")
        if not self.tick > 0 or self.spread_ticks < 1:
            raise InvalidSpec("tick must be positive and spread_ticks >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidSpec("rho must lie in [0, 1]")
        try:
            _dt.date.fromisoformat(self.start_date)
        except ValueError:
            raise InvalidSpec(f"bad start_date {self.start_date!r}") from None
        span = self.session_close_s - self.session_open_s
        for sh in self.shocks:
            if sh.code not in codes:
                raise InvalidSpec(f"shock on unknown stock {sh.code}")
            if not 0 <= sh.day < self.days or not 0 <= sh.at_s < span or sh.duration_s <= 0:
                raise InvalidSpec(f"shock outside the simulated sessions: {sh}")

    @classmethod
    def from_mapping(cls, data: dict) -> "MarketSpec":
        try:
            stocks = tuple(
                StockSpec(
                    str(s["code"]), Decimal(str(s["price"])), float(s.get("vol", 0.01)),
                    int(s.get("block", 0)), int(s.get("min_lot", 100)),
                )
                for s in data["stocks"]
            )
            shocks = tuple(
                Shock(int(s["day"]), float(s["at_s"]), str(s["code"]), float(s["magnitude"]),
                      float(s.get("duration_s", 600.0)))
                for s in data.get("shocks", ())
            )
            spec = cls(
                stocks,
                int(data.get("days", 1)),
                int(data.get("events_per_day", 1000)),
                str(data.get("start_date", "2024-01-04")),
                int(data.get("session_open_s", 9 * 3600)),
                int(data.get("session_close_s", 15 * 3600)),
                Decimal(str(data.get("tick", 1))),
                int(data.get("spread_ticks", 1)),
                float(data.get("rho", 0.8)),
                shocks,
                bool(data.get("force_change", False)),
            )
        except (KeyError, TypeError, ValueError, ArithmeticError) as exc:
            raise InvalidSpec(f"bad market spec: {exc}") from exc
        spec.validate()
        return spec

    def universe(self) -> Universe:
        return Universe.from_rows((s.code, s.min_lot, s.price) for s in self.stocks)


def default_market(n_stocks: int, events_per_day: int, days: int = 1, blocks: int = 3,
                   force_change: bool = True) -> MarketSpec:
    """A plain N-stock market used for throughput runs."""
    stocks = tuple(
        StockSpec(f"S{k + 1:02d}", Decimal(1000 + 250 * (k % 8)), 0.01, k % blocks, 100)
        for k in range(n_stocks)
    )
    return MarketSpec(stocks, days, events_per_day, force_change=force_change)


def gen_feed(spec: MarketSpec, seed: int) -> list[FeedEvent]:
    """Correlated random-walk quotes with scheduled shocks.

    Each day opens with one ``O`` record per stock and ends with one ``C``
    record per stock; quote events in between update one randomly chosen
    stock each.  Prices carry across days.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = len(spec.stocks)
    blocks = sorted({s.block for s in spec.stocks})
    bidx = np.array([blocks.index(s.block) for s in spec.stocks])
    vol = np.array([s.vol for s in spec.stocks])
    tick = spec.tick
    tick_f = float(tick)
    lo = spec.spread_ticks // 2
    hi = spec.spread_ticks - lo
    span = spec.session_close_s - spec.session_open_s
    day0 = (_dt.date.fromisoformat(spec.start_date) - _dt.date(1970, 1, 1)).days
    log_p = np.log(np.array([float(s.price) for s in spec.stocks]))
    codes = [s.code for s in spec.stocks]
    last_c = [None] * n
    out: list[FeedEvent] = []
    sq_rho, sq_idio = math.sqrt(spec.rho), math.sqrt(1.0 - spec.rho)

    def quote(k: int, lp: float, direction: float) -> tuple[Decimal, Decimal]:
        c = int(round(math.exp(lp) / tick_f))
        if spec.force_change and last_c[k] is not None and c == last_c[k]:
            c += 1 if direction >= 0 else -1
        c = max(c, lo + 1)
        last_c[k] = c
        return (c - lo) * tick, (c + hi) * tick

    for d in range(spec.days):
        base_ns = (day0 + d) * NS_PER_DAY
        open_ns = base_ns + spec.session_open_s * 10**9
        shocks = [s for s in spec.shocks if s.day == d]
        # event times (seconds from open): regular grid plus shock edges
        e = spec.events_per_day
        t = (np.arange(e) + 0.5) * (span / e) if e else np.empty(0)
        who = rng.integers(0, n, size=e)
        extra_t = [s.at_s for s in shocks] + [min(s.at_s + s.duration_s, span * (1 - 1e-9)) for s in shocks]
        extra_k = [codes.index(s.code) for s in shocks] * 2
        if extra_t:
            t = np.concatenate([t, np.array(extra_t)])
            who = np.concatenate([who, np.array(extra_k, dtype=who.dtype)])
            order = np.argsort(t, kind="stable")
            t, who = t[order], who[order]
        m = len(t)
        z_common = rng.standard_normal((m, len(blocks)))
        z_idio = rng.standard_normal(m)
        frac = np.diff(np.concatenate([[0.0], t])) / span
        common = np.cumsum(z_common * np.sqrt(frac)[:, None], axis=0)
        last_t = np.zeros(n)
        idio = np.zeros(n)
        start_lp = log_p.copy()
        for k in range(n):
            b, a = quote(k, log_p[k], 0.0)
            out.append(FeedEvent(open_ns, codes[k], b, a, EventKind.SESSION_OPEN))
        shock_shift = np.zeros(n)
        for step in range(m):
            k = int(who[step])
            ts_s = float(t[step])
            dt_frac = (ts_s - last_t[k]) / span
            last_t[k] = ts_s
            step_idio = z_idio[step] * math.sqrt(max(dt_frac, 0.0))
            idio[k] += step_idio
            for s in shocks:
                if s.code == codes[k]:
                    active = s.at_s <= ts_s < s.at_s + s.duration_s
                    shock_shift[k] = s.magnitude if active else 0.0
            lp = start_lp[k] + vol[k] * (sq_rho * common[step, bidx[k]] + sq_idio * idio[k])
            log_p[k] = lp
            b, a = quote(k, lp + shock_shift[k], step_idio)
            ts = open_ns + int(round(ts_s * 1e9))
            ts = max(ts, open_ns + 1)
            out.append(FeedEvent(ts, codes[k], b, a))
        close_ns = base_ns + spec.session_close_s * 10**9
        for k in range(n):
            c = last_c[k]
            out.append(FeedEvent(close_ns, codes[k], (c - lo) * tick, (c + hi) * tick, EventKind.SESSION_CLOSE))
    return out
