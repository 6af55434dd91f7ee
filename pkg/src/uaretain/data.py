"""Datasets: synthetic generation, long-format CSV I/O, preprocessing, splits, perturbations."""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

CSV_COLUMNS = ("record_id", "timestep", "feature", "value", "label")


class DataFormatError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


@dataclass
class Record:
    id: str
    x: np.ndarray
    mask: np.ndarray
    label: int
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError(f"record {self.id}: x must be (T>=1, F), got {self.x.shape}")
        if self.mask.shape != self.x.shape:
            raise ValueError(f"record {self.id}: mask shape {self.mask.shape} != x shape {self.x.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"record {self.id}: label must be 0 or 1, got {self.label!r}")
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=bool)

    @property
    def T(self) -> int:
        return self.x.shape[0]


@dataclass
class SplitSet:
    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int


@dataclass
class Standardizer:
    """Per-feature z-scoring fitted on observed cells only."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, records: list[Record], n_features: int) -> "Standardizer":
        total = np.zeros(n_features)
        count = np.zeros(n_features)
        for rec in records:
            total += np.where(rec.mask, rec.x, 0.0).sum(axis=0)
            count += rec.mask.sum(axis=0)
        mean = np.divide(total, count, out=np.zeros(n_features), where=count > 0)
        sq = np.zeros(n_features)
        for rec in records:
            sq += np.where(rec.mask, (rec.x - mean) ** 2, 0.0).sum(axis=0)
        sd = np.sqrt(np.divide(sq, count, out=np.zeros(n_features), where=count > 0))
        return cls(mean, sd)

    def apply(self, rec: Record) -> Record:
        scale = np.where(self.sd > 0, self.sd, 1.0)
        x = np.where(rec.mask, (rec.x - self.mean) / scale, 0.0)
        return replace(rec, x=x)


@dataclass
class Dataset:
    records: list[Record]
    feature_names: list[str]
    split: SplitSet | None = None
    standardizer: Standardizer | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, record_id: str) -> Record:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(f"unknown record id {record_id!r}")

    def subset(self, ids: list[str]) -> "Dataset":
        index = {r.id: r for r in self.records}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"unknown record ids: {missing[:5]}")
        return Dataset([index[i] for i in ids], list(self.feature_names), None, self.standardizer)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def missing_rate(self) -> float:
        cells = sum(r.mask.size for r in self.records)
        if cells == 0:
            return 0.0
        return sum(int((~r.mask).sum()) for r in self.records) / cells


def default_feature_names(n: int) -> list[str]:
    return [f"f{k}" for k in range(n)]


def _record_rng(seed: int, record_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(record_id.encode("utf-8"))])


# ------------------------------------------------------------------ synthetic

@dataclass
class SynthConfig:
    n_records: int = 2000
    T: int = 10
    F: int = 8
    n_relevant_features: int = 2
    signal_strength: float = 6.0
    feature_noise_sd: float = 0.1
    base_missing_rate: float = 0.0
    positive_rate_target: float = 0.5
    seed: int = 0
    window_len: int = 2
    ar_coef: float = 0.7

    def validate(self) -> None:
        if self.n_records < 0:
            raise ValueError("n_records must be >= 0")
        if self.T < 1 or self.F < 1:
            raise ValueError("T and F must be >= 1")
        if not 1 <= self.n_relevant_features <= self.F:
            raise ValueError("n_relevant_features must lie in [1, F]")
        if not 1 <= self.window_len <= self.T:
            raise ValueError("window_len must lie in [1, T]")
        if not 0.0 <= self.base_missing_rate < 1.0:
            raise ValueError("base_missing_rate must lie in [0, 1)")
        if not 0.0 < self.positive_rate_target < 1.0:
            raise ValueError("positive_rate_target must lie strictly between 0 and 1")
        if self.feature_noise_sd < 0:
            raise ValueError("feature_noise_sd must be >= 0")
        if not -1.0 < self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in (-1, 1)")


def gen_synthetic(config: SynthConfig) -> Dataset:
    """Labelled AR(1) series whose label depends on a planted window of cells.

    The label logit is ``intercept + signal_strength * score`` where ``score``
    is a signed, normalised sum of the relevant features over the last
    ``window_len`` timesteps of the latent (noise-free, fully observed)
    trajectories. The intercept is solved so that the mean label probability
    over the drawn scores equals ``positive_rate_target``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, T, F = config.n_records, config.T, config.F
    relevant = np.sort(rng.choice(F, size=config.n_relevant_features, replace=False))
    signs = rng.choice([-1.0, 1.0], size=config.n_relevant_features)
    window = np.arange(T - config.window_len, T)

    phi = config.ar_coef
    latent = np.empty((n, T, F))
    latent[:, 0] = rng.standard_normal((n, F))
    for t in range(1, T):
        latent[:, t] = phi * latent[:, t - 1] + math.sqrt(1 - phi * phi) * rng.standard_normal((n, F))

    cells = latent[:, window][:, :, relevant] * signs
    score = cells.sum(axis=(1, 2)) / math.sqrt(cells[0].size if n else 1)
    target = config.positive_rate_target
    s = config.signal_strength

    def rate_gap(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(b + s * score))))) - target

    intercept = brentq(rate_gap, -50.0, 50.0, xtol=1e-12) if n else 0.0
    prob = 1.0 / (1.0 + np.exp(-(intercept + s * score)))
    labels = (rng.random(n) < prob).astype(int)

    observed = latent + config.feature_noise_sd * rng.standard_normal((n, T, F))
    mask = rng.random((n, T, F)) >= config.base_missing_rate
    observed = np.where(mask, observed, 0.0)

    relevance = np.zeros((T, F), dtype=bool)
    relevance[np.ix_(window, relevant)] = True
    width = len(str(max(n - 1, 0)))
    records = [
        Record(f"r{i:0{width}d}", observed[i], mask[i], int(labels[i]), relevance.copy())
        for i in range(n)
    ]
    return Dataset(records, default_feature_names(F))


# ------------------------------------------------------------------------ CSV

def _format_value(v: float) -> str:
    return repr(float(v))


def write_csv(dataset: Dataset, path) -> None:
    """Long format; timesteps with no observed cell get one empty-valued row so T survives."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in dataset.records:
            for t in range(rec.T):
                observed = np.flatnonzero(rec.mask[t])
                if observed.size == 0:
                    w.writerow([rec.id, t, 0, "", rec.label])
                for k in observed:
                    w.writerow([rec.id, t, int(k), _format_value(rec.x[t, k]), rec.label])


def write_feature_list(names: list[str], path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def read_feature_list(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = [ln.strip() for ln in lines if ln.strip()]
    if len(set(names)) != len(names):
        raise DataFormatError(path, None, "duplicate feature names")
    return names


def write_relevance(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "timestep", "feature"))
        for rec in dataset.records:
            if rec.relevance is None:
                continue
            for t, k in zip(*np.nonzero(rec.relevance)):
                w.writerow([rec.id, int(t), int(k)])


def read_relevance(dataset: Dataset, path) -> Dataset:
    """Attach relevance masks from a sidecar file; records absent from it get all-False masks."""
    cells: dict[str, list[tuple[int, int]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("record_id", "timestep", "feature"):
            raise DataFormatError(path, 1, "expected header record_id,timestep,feature")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataFormatError(path, lineno, f"expected 3 fields, got {len(row)}")
            try:
                cells.setdefault(row[0], []).append((int(row[1]), int(row[2])))
            except ValueError:
                raise DataFormatError(path, lineno, "timestep and feature must be integers") from None
    records = []
    for rec in dataset.records:
        rel = np.zeros(rec.x.shape, dtype=bool)
        for t, k in cells.get(rec.id, []):
            if not (0 <= t < rec.T and 0 <= k < rec.x.shape[1]):
                raise DataFormatError(path, None, f"relevance cell ({t}, {k}) outside record {rec.id}")
            rel[t, k] = True
        records.append(replace(rec, relevance=rel))
    return Dataset(records, list(dataset.feature_names), dataset.split, dataset.standardizer)


def load_csv(path, feature_names: list[str] | None = None) -> Dataset:
    """Read the long format ``record_id,timestep,feature,value,label``.

    An empty ``value`` marks the cell as explicitly missing. Features are
    integers, or names when ``feature_names`` is given (which also fixes F).
    """
    path = Path(path)
    name_index = {n: i for i, n in enumerate(feature_names)} if feature_names is not None else None
    cells: dict[str, dict[tuple[int, int], float | None]] = {}
    labels: dict[str, int] = {}
    max_feature = -1
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(path, 1, "missing header")
        header = [h.strip() for h in header]
        unknown = [h for h in header if h not in CSV_COLUMNS]
        if unknown:
            raise DataFormatError(path, 1, f"unknown column(s) {unknown}")
        if sorted(header) != sorted(CSV_COLUMNS):
            raise DataFormatError(path, 1, f"header must contain exactly {', '.join(CSV_COLUMNS)}")
        col = {h: i for i, h in enumerate(header)}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise DataFormatError(path, lineno, f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            rid = row[col["record_id"]].strip()
            if not rid:
                raise DataFormatError(path, lineno, "empty record_id")
            try:
                t = int(row[col["timestep"]])
            except ValueError:
                raise DataFormatError(path, lineno, f"non-integer timestep {row[col['timestep']]!r}") from None
            if t < 0:
                raise DataFormatError(path, lineno, "negative timestep")
            k = _resolve_feature(row[col["feature"]].strip(), name_index, path, lineno)
            raw_value = row[col["value"]].strip()
            if raw_value == "":
                value = None
            else:
                try:
                    value = float(raw_value)
                except ValueError:
                    raise DataFormatError(path, lineno, f"non-numeric value {raw_value!r}") from None
                if not math.isfinite(value):
                    raise DataFormatError(path, lineno, f"non-finite value {raw_value!r}")
            label_text = row[col["label"]].strip()
            if label_text not in ("0", "1"):
                raise DataFormatError(path, lineno, f"label must be 0 or 1, got {label_text!r}")
            label = int(label_text)
            if labels.setdefault(rid, label) != label:
                raise DataFormatError(path, lineno, f"inconsistent label for record {rid!r}")
            rec_cells = cells.setdefault(rid, {})
            if (t, k) in rec_cells:
                raise DataFormatError(path, lineno, f"duplicate cell (record {rid!r}, timestep {t}, feature {k})")
            rec_cells[(t, k)] = value
            max_feature = max(max_feature, k)

    if feature_names is None:
        feature_names = default_feature_names(max_feature + 1)
    F = len(feature_names)
    records = []
    for rid, rec_cells in cells.items():
        T = max(t for t, _ in rec_cells) + 1
        x = np.zeros((T, F))
        mask = np.zeros((T, F), dtype=bool)
        for (t, k), value in rec_cells.items():
            if value is not None:
                x[t, k] = value
                mask[t, k] = True
        records.append(Record(rid, x, mask, labels[rid]))
    return Dataset(records, list(feature_names))


def _resolve_feature(token: str, name_index, path, lineno) -> int:
    if name_index is not None:
        if token in name_index:
            return name_index[token]
        try:
            k = int(token)
        except ValueError:
            raise DataFormatError(path, lineno, f"unknown feature {token!r}") from None
        if not 0 <= k < len(name_index):
            raise DataFormatError(path, lineno, f"feature index {k} out of range")
        return k
    try:
        k = int(token)
    except ValueError:
        raise DataFormatError(path, lineno, f"feature {token!r} is not an integer (no feature list given)") from None
    if k < 0:
        raise DataFormatError(path, lineno, "negative feature index")
    return k


# ------------------------------------------------------------- preprocessing

def preprocess(dataset: Dataset, train_ids: list[str] | None = None,
               standardizer: Standardizer | None = None, append_mask: bool = False) -> Dataset:
    """Z-score each feature with statistics from the training records, impute missing cells to 0.

    ``standardizer`` reuses stored statistics (validation/test, evaluation);
    otherwise they are fitted on ``train_ids`` (default: all records).
    """
    if standardizer is None:
        fit_on = dataset.records if train_ids is None else dataset.subset(train_ids).records
        standardizer = Standardizer.fit(fit_on, dataset.n_features)
    records = [standardizer.apply(rec) for rec in dataset.records]
    names = list(dataset.feature_names)
    if append_mask:
        records = [_with_mask_features(rec) for rec in records]
        names += [f"{n}_observed" for n in names]
    return Dataset(records, names, dataset.split, standardizer)


def _with_mask_features(rec: Record) -> Record:
    x = np.concatenate([rec.x, rec.mask.astype(np.float64)], axis=1)
    mask = np.concatenate([rec.mask, np.ones_like(rec.mask)], axis=1)
    rel = None
    if rec.relevance is not None:
        rel = np.concatenate([rec.relevance, np.zeros_like(rec.relevance)], axis=1)
    return Record(rec.id, x, mask, rec.label, rel)


def split(dataset: Dataset, seed: int) -> SplitSet:
    """Seeded 80/10/10 partition; validation and test sizes are floors, train takes the rest."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    ids = dataset.ids()
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    return SplitSet(
        train=[ids[i] for i in order[:n_train]],
        validation=[ids[i] for i in order[n_train:n_train + n_val]],
        test=[ids[i] for i in order[n_train + n_val:]],
        seed=seed,
    )


STANDARD_SPLIT_SEEDS = (1, 2, 3, 4, 5)


# --------------------------------------------------------------- perturbation

@dataclass
class Perturbed:
    dataset: Dataset
    cells: dict[str, np.ndarray] = field(default_factory=dict)


def corrupt_gaussian(dataset: Dataset, sd: float, seed: int = 0) -> Perturbed:
    """Add N(0, sd^2) noise to observed cells; noise is keyed by record id."""
    if sd < 0:
        raise ValueError("sd must be >= 0")
    records, cells = [], {}
    for rec in dataset.records:
        if sd == 0:
            records.append(rec)
            cells[rec.id] = np.zeros_like(rec.mask)
            continue
        noise = _record_rng(seed, rec.id).standard_normal(rec.x.shape) * sd
        records.append(replace(rec, x=np.where(rec.mask, rec.x + noise, rec.x)))
        cells[rec.id] = rec.mask.copy()
    return Perturbed(Dataset(records, list(dataset.feature_names), dataset.split, dataset.standardizer), cells)


def inflate_missing(dataset: Dataset, target_rate: float, seed: int = 0) -> Perturbed:
    """Hide extra observed cells, chosen uniformly at random, until the missing rate hits ``target_rate``."""
    if not 0.0 <= target_rate <= 1.0:
        raise ValueError("target_rate must lie in [0, 1]")
    total = sum(r.mask.size for r in dataset.records)
    missing = sum(int((~r.mask).sum()) for r in dataset.records)
    if total and target_rate < missing / total - 1.0 / total:
        raise ValueError(f"target rate {target_rate} is below the current missing rate {missing / total:.6f}")
    n_extra = max(0, int(round(target_rate * total)) - missing)
    keys = {rec.id: np.where(rec.mask, _record_rng(seed, rec.id).random(rec.mask.shape), np.inf)
            for rec in dataset.records}
    if n_extra:
        pooled = np.sort(np.concatenate([k.ravel() for k in keys.values()]))
        cutoff = pooled[n_extra - 1]
    else:
        cutoff = -np.inf
    records, cells = [], {}
    for rec in dataset.records:
        hide = keys[rec.id] <= cutoff
        cells[rec.id] = hide
        records.append(replace(rec, mask=rec.mask & ~hide, x=np.where(hide, 0.0, rec.x)))
    return Perturbed(Dataset(records, list(dataset.feature_names), dataset.split, dataset.standardizer), cells)
