"""Booking histories: schema, synthetic generator, CSV ingestion, sequences.

Time is a global clock in years from the start of the observation period
(``time_offset`` in the CSV).  With the default ``split_year=18`` and
``window=2`` a suspect yields up to two samples:

* train: history = bookings before year 16, label from the last booking in
  [16, 18) if any;
* test:  history = bookings before year 18, label from the last booking in
  [18, 20) if any.

A sample needs at least two bookings in total and at least one history
booking.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

RACES = ("W", "A", "U", "B", "I")
NCIC_CATEGORIES = ("ASSL", "TO", "DAD", "LARC", "FO", "PP", "BURG", "SV", "DP", "OP")
LEVELS = (1, 2, 3)
TASKS = ("level1", "level2", "level3", "any")
MAX_STEPS = 12
MAX_BOOKINGS = 13
CSV_HEADER = ("person_id", "race", "age", "level", "ncic", "time_offset")

STEP_FEATURES = (
    ("age_at_booking", "crime_level")
    + tuple(f"ncic_{c}" for c in NCIC_CATEGORIES)
    + ("time_gap_since_prev", "cum_level1", "cum_level2", "cum_level3", "padding_flag")
)
STATIC_FEATURES = tuple(f"race_{r}" for r in RACES) + (
    "num_bookings",
    "age_average",
    "count_level1",
    "count_level2",
    "count_level3",
    "time_since_last_crime",
    "variance_of_time_gaps",
)
PAD_INDEX = STEP_FEATURES.index("padding_flag")


def flat_feature_names() -> list[str]:
    """Names of the flattened vector: 12 step blocks, then the statics."""
    names = [f"step{k + 1:02d}.{f}" for k in range(MAX_STEPS) for f in STEP_FEATURES]
    return names + list(STATIC_FEATURES)


NUM_FLAT_FEATURES = MAX_STEPS * len(STEP_FEATURES) + len(STATIC_FEATURES)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Booking:
    age_at_booking: int
    crime_level: int
    ncic_category: int
    time_offset: float


@dataclass(frozen=True)
class SuspectRecord:
    person_id: str
    race: str
    bookings: tuple[Booking, ...]

    def __post_init__(self):
        if not self.bookings:
            raise DataError(f"{self.person_id}: a suspect needs at least one booking")
        if self.race not in RACES:
            raise DataError(f"{self.person_id}: unknown race code {self.race!r}")
        times = [b.time_offset for b in self.bookings]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"{self.person_id}: booking times must strictly increase")


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

# Level-conditional NCIC category distribution (rows: level 1..3).
_NCIC_BY_LEVEL = np.array([
    # ASSL  TO   DAD  LARC  FO   PP  BURG  SV   DP   OP
    [0.35, 0.15, 0.00, 0.00, 0.05, 0.05, 0.00, 0.25, 0.00, 0.15],
    [0.10, 0.00, 0.00, 0.30, 0.15, 0.15, 0.10, 0.00, 0.00, 0.20],
    [0.00, 0.00, 0.25, 0.10, 0.00, 0.00, 0.20, 0.00, 0.25, 0.20],
])


@dataclass
class GeneratorConfig:
    n_suspects: int = 17335
    horizon: float = 20.0
    split_year: float = 18.0
    window: float = 2.0
    # pooled level-task positive rates targeted by default
    target_rates: tuple[float, float, float] = (0.067, 0.035, 0.087)
    max_any_rate: float = 0.5
    race_shares: tuple[float, ...] = (0.30, 0.03, 0.05, 0.60, 0.02)
    one_timer_fraction: float = 0.3
    first_start_max: float = 17.0
    period_range: tuple[float, float] = (0.4, 2.5)
    period_drift: float = 0.3
    period_jitter: float = 0.1
    adjacent_proposal: float = 0.2
    jump_proposal: float = 0.05

    def validate(self):
        if self.n_suspects < 1:
            raise DataError("need at least one suspect")
        if any(not 0.0 < r < 1.0 for r in self.target_rates):
            raise DataError(f"target rates must lie in (0, 1): {self.target_rates}")
        if sum(self.target_rates) > self.max_any_rate:
            raise DataError(
                f"infeasible target rates: sum {sum(self.target_rates):.4f} exceeds any-crime cap {self.max_any_rate}"
            )
        if len(self.race_shares) != len(RACES) or abs(sum(self.race_shares) - 1.0) > 1e-9:
            raise DataError("race_shares must be five probabilities summing to 1")


def level_transition_matrix(stationary: Sequence[float], adjacent: float = 0.2, jump: float = 0.05) -> np.ndarray:
    """Reversible persistence-biased chain over levels 1..3 with the given stationary law.

    Metropolis construction on a symmetric proposal that moves one level with
    probability ``adjacent`` and two levels with ``jump``.
    """
    pi = np.asarray(stationary, dtype=np.float64)
    pi = pi / pi.sum()
    Q = np.array([
        [1.0 - adjacent - jump, adjacent, jump],
        [adjacent, 1.0 - 2 * adjacent, adjacent],
        [jump, adjacent, 1.0 - adjacent - jump],
    ])
    P = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i != j:
                P[i, j] = Q[i, j] * min(1.0, pi[j] / pi[i])
        P[i, i] = 1.0 - P[i].sum()
    return P


@dataclass
class _Draws:
    race: np.ndarray
    first_age: np.ndarray
    one_timer: np.ndarray
    t0: np.ndarray
    gaps: np.ndarray
    cont: np.ndarray
    levels: np.ndarray  # 0-based level index per potential booking
    ncic_u: np.ndarray


def _draw(cfg: GeneratorConfig, seed: int) -> _Draws:
    n = cfg.n_suspects
    k = MAX_BOOKINGS
    race = np.empty(n, dtype=np.int64)
    first_age = np.empty(n)
    one = np.empty(n, dtype=bool)
    t0 = np.empty(n)
    gaps = np.empty((n, k - 1))
    cont = np.empty((n, k - 1))
    levels = np.empty((n, k), dtype=np.int64)
    ncic_u = np.empty((n, k))
    lo, hi = np.log(cfg.period_range[0]), np.log(cfg.period_range[1])
    shares = np.cumsum(cfg.race_shares)
    pi = np.asarray(cfg.target_rates) / sum(cfg.target_rates)
    cum_pi = np.cumsum(pi)
    cum_P = np.cumsum(level_transition_matrix(pi, cfg.adjacent_proposal, cfg.jump_proposal), axis=1)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        u = rng.random(5)
        race[i] = min(int(np.searchsorted(shares, u[0], side="right")), len(RACES) - 1)
        first_age[i] = 14.0 + rng.gamma(2.0, 6.0)
        one[i] = u[1] < cfg.one_timer_fraction
        t0[i] = u[2] * (cfg.horizon if one[i] else cfg.first_start_max)
        z = rng.standard_normal((2, k - 1))
        log_period = np.clip(lo + (hi - lo) * u[3] + cfg.period_drift * np.cumsum(z[0]), lo, hi)
        gaps[i] = np.exp(log_period + cfg.period_jitter * z[1])
        cont[i] = rng.random(k - 1)
        level_u = rng.random(k)
        ncic_u[i] = rng.random(k)
        level = None
        for j in range(k):
            row = cum_pi if level is None else cum_P[level]
            level = min(int(np.searchsorted(row, level_u[j], side="right")), 2)
            levels[i, j] = level
    return _Draws(race, first_age, one, t0, gaps, cont, levels, ncic_u)


def _timeline(d: _Draws, hazard: float, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Booking times [n, 13] and existence mask for a per-booking desistance hazard."""
    times = np.concatenate([d.t0[:, None], d.t0[:, None] + np.cumsum(d.gaps, axis=1)], axis=1)
    go = d.cont >= hazard
    go[:, 0] = True  # every repeat offender has a second booking
    alive = np.ones(times.shape, dtype=bool)
    alive[:, 1:] = np.cumprod(go, axis=1).astype(bool)
    alive[d.one_timer, 1:] = False
    alive &= times < cfg.horizon
    return times, alive


def _pooled_any_rate(times, alive, cfg: GeneratorConfig) -> float:
    pos = total = 0
    for cut in (cfg.split_year - cfg.window, cfg.split_year):
        hist = (alive & (times < cut)).sum(axis=1)
        win = (alive & (times >= cut) & (times < cut + cfg.window)).sum(axis=1)
        eligible = (hist >= 1) & (hist + win >= 2)
        pos += int((eligible & (win > 0)).sum())
        total += int(eligible.sum())
    return pos / total if total else float("nan")


def calibrate_hazard(d: _Draws, cfg: GeneratorConfig, iters: int = 60) -> float:
    """Desistance hazard at which the pooled any-crime rate meets the target."""
    target = sum(cfg.target_rates)
    rate = lambda h: _pooled_any_rate(*_timeline(d, h, cfg), cfg)  # noqa: E731
    lo, hi = 0.0, 1.0
    r_lo, r_hi = rate(lo), rate(hi)
    if not (r_hi <= target <= r_lo):
        raise DataError(f"infeasible target any-rate {target:.4f}: reachable range [{r_hi:.4f}, {r_lo:.4f}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(cfg: GeneratorConfig | None = None, seed: int = 0) -> list[SuspectRecord]:
    """Seeded synthetic booking histories calibrated to the target class rates.

    Race and age are drawn independently of all timing and level dynamics.
    Repeat offenders book quasi-periodically (a per-suspect log-period that
    drifts as a clipped random walk, plus log-normal jitter) until they
    desist with a constant per-booking hazard.  The hazard is solved for so
    the pooled any-crime rate equals the sum of the level targets.  Levels follow a persistent reversible Markov chain
    whose stationary law is proportional to the level targets.
    """
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    d = _draw(cfg, seed)
    hazard = calibrate_hazard(d, cfg)
    times, alive = _timeline(d, hazard, cfg)
    cum_ncic = np.cumsum(_NCIC_BY_LEVEL, axis=1)

    records = []
    for i in range(cfg.n_suspects):
        n_b = int(alive[i].sum())
        if n_b == 0:
            # a one-timer whose start fell outside the horizon cannot occur; keep the guard
            continue
        bookings = []
        for j in range(n_b):
            level = int(d.levels[i, j])
            cat = min(int(np.searchsorted(cum_ncic[level], d.ncic_u[i, j], side="right")), len(NCIC_CATEGORIES) - 1)
            t = float(times[i, j])
            age = int(math.floor(d.first_age[i] + (t - d.t0[i])))
            bookings.append(Booking(age, level + 1, cat, t))
        records.append(SuspectRecord(f"P{i:06d}", RACES[d.race[i]], tuple(bookings)))
    return records


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def write_csv(records: Iterable[SuspectRecord], path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                for b in r.bookings:
                    w.writerow([r.person_id, r.race, b.age_at_booking, b.crime_level,
                                NCIC_CATEGORIES[b.ncic_category], repr(float(b.time_offset))])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_csv(path) -> list[SuspectRecord]:
    """Read one-row-per-booking CSV into records grouped by person, sorted by time."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    people: dict[str, tuple[str, list[Booking]]] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            pid, race, age, level, ncic, t = (x.strip() for x in row)
            if race not in RACES:
                raise DataError(f"{path}:{lineno}: unknown race code {race!r}")
            if ncic not in NCIC_CATEGORIES:
                raise DataError(f"{path}:{lineno}: unknown NCIC category {ncic!r}")
            try:
                age_i, level_i, t_f = int(age), int(level), float(t)
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed numeric field") from None
            if age_i < 10 or level_i not in LEVELS or not (t_f >= 0.0 and math.isfinite(t_f)):
                raise DataError(f"{path}:{lineno}: value out of range")
            entry = people.setdefault(pid, (race, []))
            if entry[0] != race:
                raise DataError(f"{path}:{lineno}: race of {pid} changes between rows")
            entry[1].append(Booking(age_i, level_i, NCIC_CATEGORIES.index(ncic), t_f))
    records = []
    for pid, (race, bookings) in people.items():
        bookings.sort(key=lambda b: b.time_offset)
        times = [b.time_offset for b in bookings]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"{path}: {pid} has tied booking times")
        records.append(SuspectRecord(pid, race, tuple(bookings)))
    return records


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------


@dataclass
class SequenceSample:
    person_id: str
    task: str
    label: int
    steps: np.ndarray  # [12, len(STEP_FEATURES)]
    static: np.ndarray  # [len(STATIC_FEATURES)]
    final_level: int  # 0 when no booking in the label window
    final_time: float | None
    history_levels: tuple[int, ...]
    cutoff: float
    age: int  # age at the most recent history booking
    race: str

    def flat(self) -> np.ndarray:
        return np.concatenate([self.steps.reshape(-1), self.static])

    def sequence(self) -> np.ndarray:
        """[12, step + static] with the static block repeated on every step."""
        return np.concatenate([self.steps, np.broadcast_to(self.static, (MAX_STEPS, self.static.size))], axis=1)

    @property
    def key(self) -> tuple[str, float]:
        return (self.person_id, self.cutoff)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "person_id": self.person_id, "task": self.task,
            "label": self.label, "steps": self.steps.tolist(), "static": self.static.tolist(),
            "final_level": self.final_level, "final_time": self.final_time,
            "history_levels": list(self.history_levels), "cutoff": self.cutoff, "age": self.age,
            "race": self.race,
        }

    @classmethod
    def from_json(cls, obj: dict) -> SequenceSample:
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported sample schema_version {obj.get('schema_version')!r}")
        return cls(obj["person_id"], obj["task"], int(obj["label"]), np.asarray(obj["steps"], dtype=np.float64),
                   np.asarray(obj["static"], dtype=np.float64), int(obj["final_level"]), obj["final_time"],
                   tuple(obj["history_levels"]), float(obj["cutoff"]), int(obj["age"]), obj["race"])


@dataclass
class Dataset:
    samples: list[SequenceSample]
    split: str
    task: str
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for s in self.samples:
            if s.task != self.task:
                raise DataError(f"sample task {s.task!r} differs from dataset task {self.task!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def inputs(self, layout: str) -> np.ndarray:
        if layout == "flat":
            return np.stack([s.flat() for s in self.samples]) if self.samples else np.zeros((0, NUM_FLAT_FEATURES))
        if layout == "sequence":
            return np.stack([s.sequence() for s in self.samples])
        raise ValueError(f"unknown layout {layout!r}")

    def subset(self, idx: Sequence[int], split: str | None = None) -> Dataset:
        return Dataset([self.samples[i] for i in idx], split or self.split, self.task, self.schema_version)

    def to_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for s in self.samples:
                obj = s.to_json()
                obj["split"] = self.split
                fh.write(json.dumps(obj) + "\n")

    @classmethod
    def from_jsonl(cls, path, split: str | None = None) -> Dataset:
        samples, splits = [], set()
        with Path(path).open() as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    splits.add(obj.get("split"))
                    samples.append(SequenceSample.from_json(obj))
        if not samples:
            raise DataError(f"{path}: no samples")
        task = samples[0].task
        return cls(samples, split or (splits.pop() if len(splits) == 1 else "mixed"), task)


def _label(task: str, final_level: int) -> int:
    if task == "any":
        return int(final_level > 0)
    if task in ("level1", "level2", "level3"):
        return int(final_level == int(task[-1]))
    raise ValueError(f"unknown task {task!r}")


def make_sample(record: SuspectRecord, task: str, cutoff: float, window: float) -> SequenceSample | None:
    """Sample for label window [cutoff, cutoff + window), or None if ineligible."""
    history = [b for b in record.bookings if b.time_offset < cutoff]
    in_window = [b for b in record.bookings if cutoff <= b.time_offset < cutoff + window]
    if not history or len(history) + len(in_window) < 2:
        return None
    final = in_window[-1] if in_window else None
    final_level = final.crime_level if final else 0

    steps = np.zeros((MAX_STEPS, len(STEP_FEATURES)))
    steps[:, PAD_INDEX] = 1.0
    cum = [0, 0, 0]
    rows = []
    prev_t = None
    for b in history:
        cum[b.crime_level - 1] += 1
        row = np.zeros(len(STEP_FEATURES))
        row[0] = b.age_at_booking
        row[1] = b.crime_level
        row[2 + b.ncic_category] = 1.0
        row[12] = 0.0 if prev_t is None else b.time_offset - prev_t
        row[13:16] = cum
        rows.append(row)
        prev_t = b.time_offset
    rows = rows[-MAX_STEPS:]  # keep the most recent history
    steps[: len(rows)] = rows

    times = np.array([b.time_offset for b in history])
    gaps = np.diff(times)
    static = np.zeros(len(STATIC_FEATURES))
    static[RACES.index(record.race)] = 1.0
    static[5] = len(history)
    static[6] = float(np.mean([b.age_at_booking for b in history]))
    static[7:10] = cum
    static[10] = cutoff - times[-1]
    static[11] = float(np.var(gaps)) if gaps.size else 0.0
    return SequenceSample(
        person_id=record.person_id, task=task, label=_label(task, final_level), steps=steps, static=static,
        final_level=final_level, final_time=final.time_offset if final else None,
        history_levels=tuple(b.crime_level for b in history), cutoff=float(cutoff),
        age=history[-1].age_at_booking, race=record.race,
    )


def build_sequences(records: Sequence[SuspectRecord], task: str, split_year: float = 18.0,
                    window: float = 2.0) -> tuple[Dataset, Dataset]:
    """Train/test datasets for ``task`` with a temporal split at ``split_year``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if not records:
        raise DataError("build_sequences: no records")
    t_min = min(r.bookings[0].time_offset for r in records)
    if not t_min < split_year - window:
        raise DataError(f"split_year {split_year} leaves no training history (earliest booking {t_min})")
    ordered = sorted(records, key=lambda r: r.person_id)
    train, test = [], []
    for r in ordered:
        s = make_sample(r, task, split_year - window, window)
        if s is not None:
            train.append(s)
        s = make_sample(r, task, split_year, window)
        if s is not None:
            test.append(s)
    return Dataset(train, "train", task), Dataset(test, "test", task)


def validation_split(ds: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded random held-out fraction of the samples; both parts keep dataset order."""
    n_valid = max(1, int(round(fraction * len(ds)))) if len(ds) > 1 else 0
    order = np.random.default_rng(seed).permutation(len(ds))
    valid_idx = sorted(order[:n_valid].tolist())
    train_idx = sorted(order[n_valid:].tolist())
    return ds.subset(train_idx, "train"), ds.subset(valid_idx, "valid")


# --------------------------------------------------------------------------
# class statistics
# --------------------------------------------------------------------------

AGE_BUCKETS = (("<=20", 0, 20), ("21-30", 21, 30), ("31-50", 31, 50), (">50", 51, 10 ** 6))


def class_stats(ds: Dataset) -> list[dict]:
    """Yes/no label percentages overall, by age bucket and by race."""
    if not len(ds):
        raise DataError("class_stats: empty dataset")

    def row(name, members):
        n = len(members)
        if n == 0:
            return {"group": name, "n": 0, "yes": None, "no": None}
        yes = 100.0 * sum(s.label for s in members) / n
        return {"group": name, "n": n, "yes": yes, "no": 100.0 - yes}

    rows = [row("All", ds.samples)]
    for name, lo, hi in AGE_BUCKETS:
        rows.append(row(name, [s for s in ds.samples if lo <= s.age <= hi]))
    for r in RACES:
        rows.append(row(r, [s for s in ds.samples if s.race == r]))
    return rows
