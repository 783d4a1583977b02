"""Interaction data: ingestion, k-core filtering, chronological splits, example building, synthesis."""

from __future__ import annotations

import csv
import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

COLUMNS = ("user_id", "item_id", "timestamp", "behavior")
SPLITS = ("train", "val", "test")
LONG, SHORT = "LONG", "SHORT"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the stream named by ``labels`` under ``seed``."""
    words = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        words.append(lab & 0xFFFFFFFF if isinstance(lab, int) else zlib.crc32(str(lab).encode()))
    return np.random.default_rng(words)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    behavior: str = "click"

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


def load_interactions(path, fmt: str | None = None, behaviors=("click",)) -> list[InteractionRecord]:
    """Read a CSV/TSV file with header ``user_id,item_id,timestamp,behavior``.

    Rows whose behavior is not in ``behaviors`` are dropped (pass ``None`` to
    keep everything).  Errors name the offending line.
    """
    path = Path(path)
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    fmt = fmt.lower()
    if fmt not in ("csv", "tsv"):
        raise DataError(f"unknown format {fmt!r}")
    delim = "\t" if fmt == "tsv" else ","
    keep = None if behaviors is None else set(behaviors)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ts_raw = row[col["timestamp"]].strip()
            try:
                ts = int(ts_raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts_raw!r} is not an integer") from None
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {ts}")
            beh = row[col["behavior"]].strip()
            if keep is not None and beh not in keep:
                continue
            out.append(InteractionRecord(row[col["user_id"]].strip(), row[col["item_id"]].strip(), ts, beh))
    return out


def write_interactions(path, records, fmt: str = "csv") -> None:
    delim = "\t" if fmt == "tsv" else ","
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delim, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in records:
            w.writerow((r.user_id, r.item_id, r.timestamp, r.behavior))


def core_filter(records: list, threshold: int = 10) -> list:
    """Drop users and items with fewer than ``threshold`` interactions until nothing changes."""
    if threshold < 1:
        raise ValueError("core threshold must be >= 1")
    current = list(records)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= threshold and items[r.item_id] >= threshold]
        if len(kept) == len(current):
            return kept
        current = kept


@dataclass
class UserSequence:
    items: np.ndarray  # dense item ids in time order
    times: np.ndarray
    behaviors: list
    split: list = None  # per-interaction split tag
    drivers: list = None  # synthetic ground truth, LONG/SHORT


@dataclass
class InteractionDataset:
    user_ids: list  # dense id -> raw id
    item_ids: list
    sequences: list  # one UserSequence per dense user id

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return sum(len(s.items) for s in self.sequences)

    @classmethod
    def from_records(cls, records: list, drivers: dict | None = None) -> "InteractionDataset":
        """Build dense ids (sorted raw ids) and per-user time-ordered sequences.

        Ties in timestamp keep input order.  ``drivers`` optionally maps
        ``(user_id, position)`` to a LONG/SHORT label.
        """
        if not records:
            raise DataError("no interactions")
        user_ids = sorted({r.user_id for r in records})
        item_ids = sorted({r.item_id for r in records})
        uidx = {u: i for i, u in enumerate(user_ids)}
        iidx = {v: i for i, v in enumerate(item_ids)}
        per_user = [[] for _ in user_ids]
        for r in records:
            per_user[uidx[r.user_id]].append(r)
        seqs = []
        for u, rows in enumerate(per_user):
            rows = sorted(rows, key=lambda r: r.timestamp)  # stable
            drv = None
            if drivers is not None:
                drv = [drivers.get((user_ids[u], p)) for p in range(len(rows))]
            seqs.append(UserSequence(
                items=np.array([iidx[r.item_id] for r in rows], dtype=np.int64),
                times=np.array([r.timestamp for r in rows], dtype=np.int64),
                behaviors=[r.behavior for r in rows],
                split=["train"] * len(rows),
                drivers=drv,
            ))
        return cls(user_ids, item_ids, seqs)


def chronological_split(dataset: InteractionDataset, t_val: int, t_test: int) -> InteractionDataset:
    """Tag interactions train (< t_val), val ([t_val, t_test)) or test (>= t_test)."""
    if not t_val < t_test:
        raise DataError(f"split boundaries out of order: {t_val} >= {t_test}")
    seqs = []
    for s in dataset.sequences:
        tags = np.where(s.times < t_val, "train", np.where(s.times < t_test, "val", "test")).tolist()
        seqs.append(replace(s, split=tags))
    return replace(dataset, sequences=seqs)


def quantile_boundaries(dataset: InteractionDataset, val_frac: float = 0.8,
                        test_frac: float = 0.9) -> tuple[int, int]:
    """Split timestamps at quantiles of the observed time range."""
    times = np.concatenate([s.times for s in dataset.sequences])
    lo, hi = int(times.min()), int(times.max())
    t_val = lo + int((hi - lo) * val_frac)
    t_test = lo + int((hi - lo) * test_frac)
    return t_val, max(t_test, t_val + 1)


@dataclass
class TrainingExample:
    user: int
    items: np.ndarray  # history prefix, oldest first
    times: np.ndarray  # timestamps of the prefix
    target_time: int
    positive: int
    negatives: np.ndarray
    split: str = "train"
    driver: str | None = None
    behavior: str = "click"

    def __post_init__(self):
        if len(self.items) == 0:
            raise DataError("empty history prefix")

    @property
    def length(self) -> int:
        return len(self.items)

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([[self.positive], self.negatives]).astype(np.int64)

    @property
    def dt_features(self) -> np.ndarray:
        """``(t, 2)``: log1p(seconds since previous step), log1p(seconds until the target)."""
        return interval_features(self.times, self.target_time)


def interval_features(times: np.ndarray, target_time: int) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    gaps = np.zeros(len(times))
    gaps[1:] = np.maximum(np.diff(times), 0.0)
    until = np.maximum(float(target_time) - times, 0.0)
    return np.stack([np.log1p(gaps), np.log1p(until)], axis=1)


def sample_negatives(rng: np.random.Generator, n_items: int, exclude: set, n: int) -> np.ndarray:
    """Draw ``n`` distinct items uniformly from the catalog minus ``exclude`` by rejection."""
    if n_items - len(exclude) < n:
        raise DataError(f"catalog of {n_items} items cannot supply {n} negatives "
                        f"outside {len(exclude)} excluded items")
    picked: list = []
    chosen: set = set()
    while len(picked) < n:
        for c in rng.integers(0, n_items, size=2 * (n - len(picked)) + 4).tolist():
            if c in exclude or c in chosen:
                continue
            chosen.add(c)
            picked.append(c)
            if len(picked) == n:
                break
    return np.array(picked, dtype=np.int64)


def build_examples(dataset: InteractionDataset, n_negatives: int, max_seq_len: int, seed,
                   splits=None) -> list[TrainingExample]:
    """One example per target position ``p >= 1`` of every user sequence.

    The history is the most recent ``max_seq_len`` interactions before ``p``.
    Negatives exclude the user's whole interaction set.  Each user draws from
    its own stream derived from ``seed``, so the result does not depend on
    iteration order.
    """
    if n_negatives < 1:
        raise ValueError("n_negatives must be >= 1")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**31 - 1))
    wanted = None if splits is None else set(splits)
    out = []
    for u, s in enumerate(dataset.sequences):
        rng = derive_rng(seed, "examples", u)
        seen = set(s.items.tolist())
        for p in range(1, len(s.items)):
            tag = s.split[p] if s.split is not None else "train"
            if wanted is not None and tag not in wanted:
                continue
            lo = max(0, p - max_seq_len)
            out.append(TrainingExample(
                user=u,
                items=s.items[lo:p].copy(),
                times=s.times[lo:p].copy(),
                target_time=int(s.times[p]),
                positive=int(s.items[p]),
                negatives=sample_negatives(rng, dataset.n_items, seen, n_negatives),
                split=tag,
                driver=s.drivers[p] if s.drivers is not None else None,
                behavior=s.behaviors[p],
            ))
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_items: int = 500
    n_topics: int = 20
    min_len: int = 30
    max_len: int = 60
    w_long: float = 0.5
    drift: float = 0.15  # per-step probability that the session topic moves
    long_topics: int = 2  # topics with mass in each user's long-term distribution
    horizon: int = 30 * 86400  # seconds spanned by every user's sequence
    within_gap: float = 300.0  # mean gap inside a session
    switch_gap: float = 6 * 3600.0  # mean gap when the session topic moves
    popularity: float = 1.0  # Zipf exponent of item choice inside a topic; 0 = uniform

    def validate(self) -> None:
        if self.n_topics > self.n_items:
            raise DataError(f"n_topics={self.n_topics} exceeds n_items={self.n_items}")
        if not 0.0 <= self.w_long <= 1.0:
            raise DataError("w_long must lie in [0, 1]")
        if not 0.0 <= self.drift <= 1.0:
            raise DataError("drift must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if not 1 <= self.long_topics <= self.n_topics:
            raise DataError("long_topics must be in [1, n_topics]")
        if self.n_users < 1:
            raise DataError("n_users must be >= 1")
        if self.popularity < 0:
            raise DataError("popularity must be >= 0")

    @property
    def items_per_topic(self) -> int:
        return self.n_items // self.n_topics


@dataclass
class SyntheticData:
    records: list
    drivers: list  # (user_id, position, driver)
    item_topic: dict = field(default_factory=dict)  # item_id -> topic
    config: SynthConfig = None

    def driver_map(self) -> dict:
        return {(u, p): d for u, p, d in self.drivers}

    def to_dataset(self) -> InteractionDataset:
        return InteractionDataset.from_records(self.records, drivers=self.driver_map())


def synthesize(cfg: SynthConfig, seed: int) -> SyntheticData:
    """Sequences with a planted long-term topic mixture and a drifting session topic.

    Item ``i`` belongs to topic ``i % n_topics``.  Each interaction picks its
    driver first: LONG with probability ``w_long`` (topic drawn from the
    user's fixed mixture), otherwise SHORT (the current session topic).  The
    session topic jumps to a uniformly chosen other topic with probability
    ``drift`` per step; such jumps also open a longer time gap.
    """
    cfg.validate()
    rng = derive_rng(seed, "synthesize")
    topics = np.arange(cfg.n_items) % cfg.n_topics
    by_topic = [np.flatnonzero(topics == k) for k in range(cfg.n_topics)]
    # the lowest ids of each topic are its most popular items
    topic_p = [np.arange(1, len(ids) + 1, dtype=np.float64) ** -cfg.popularity for ids in by_topic]
    topic_p = [w / w.sum() for w in topic_p]
    width = len(str(max(cfg.n_users, cfg.n_items) - 1))
    item_name = [f"i{i:0{width}d}" for i in range(cfg.n_items)]
    records, drivers = [], []
    for u in range(cfg.n_users):
        uid = f"u{u:0{width}d}"
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        long_set = rng.choice(cfg.n_topics, size=cfg.long_topics, replace=False)
        long_w = rng.dirichlet(np.ones(cfg.long_topics))
        session = int(rng.integers(cfg.n_topics))
        gaps = np.empty(length)
        for p in range(length):
            moved = p > 0 and cfg.n_topics > 1 and rng.random() < cfg.drift
            if moved:
                session = int((session + rng.integers(1, cfg.n_topics)) % cfg.n_topics)
            gaps[p] = rng.exponential(cfg.switch_gap if moved else cfg.within_gap) + 1.0
            if rng.random() < cfg.w_long:
                topic, driver = int(long_set[rng.choice(cfg.long_topics, p=long_w)]), LONG
            else:
                topic, driver = session, SHORT
            item = int(rng.choice(by_topic[topic], p=topic_p[topic]))
            records.append((uid, item_name[item], driver))
            drivers.append((uid, p, driver))
        # stretch each user's timeline over the same horizon so a time split hits everyone
        offset = int(rng.integers(0, 3600))
        cum = np.cumsum(gaps) - gaps[0]
        span = cum[-1] if cum[-1] > 0 else 1.0
        stamps = offset + np.floor(cum / span * (cfg.horizon - 3600)).astype(np.int64)
        stamps = np.maximum.accumulate(stamps + np.arange(length))  # strictly increasing
        for p in range(length):
            rec = records[-length + p]
            records[-length + p] = InteractionRecord(rec[0], rec[1], int(stamps[p]), "click")
    return SyntheticData(records, drivers, {item_name[i]: int(topics[i]) for i in range(cfg.n_items)}, cfg)


def write_drivers(path, drivers) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_id", "position", "driver"))
        for row in drivers:
            w.writerow(row)


def load_drivers(path) -> dict:
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                out[(row["user_id"], int(row["position"]))] = row["driver"]
            except (KeyError, ValueError, TypeError):
                raise DataError(f"{path}:{lineno}: malformed driver row") from None
    return out
