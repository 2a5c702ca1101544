"""Turn raw, irregularly timestamped KPI logs into aligned, filtered,
fixed-length sequence datasets.

Stages (each a pure function over immutable inputs):

  parse_kpi_log -> moving_average -> fill_and_filter -> iqr_filter
      -> build_sequences -> normalize_dataset

A ``KpiFrame`` stores one row per populated aggregation window.  Rows are
keyed by an integer window index (``steps``) so that "consecutive
timestamps spaced by t_step" reduces to an integer diff of 1; gaps are
simply missing indices.  Absent KPI values are NaN until ``fill_and_filter``
resolves them.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, SchemaError

KPI_NAMES = (
    "spectral_efficiency",
    "rsrp",
    "sinr",
    "mimo_rank",
    "mcs",
    "rb_number",
    "cqi",
    "rsrq",
    "pmi",
    "ue_rssi",
    "ue_buffer_status",
    "packet_delay",
    "bler",
)
N_KPIS = len(KPI_NAMES)
PACKET_DELAY_IDX = KPI_NAMES.index("packet_delay")
DELAY_SENTINEL = -1.0
DEFAULT_WINDOW_LEN_MS = 100.0
DEFAULT_T_STEP_MS = 20.0
DEFAULT_SEQ_LEN = 28


@dataclass
class KpiRecord:
    """One timestamped measurement row; any KPI may be absent (None)."""

    timestamp: float
    spectral_efficiency: float | None = None
    rsrp: float | None = None
    sinr: float | None = None
    mimo_rank: float | None = None
    mcs: float | None = None
    rb_number: float | None = None
    cqi: float | None = None
    rsrq: float | None = None
    pmi: float | None = None
    ue_rssi: float | None = None
    ue_buffer_status: float | None = None
    packet_delay: float | None = None
    bler: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ParameterError(f"timestamp must be finite and non-negative, got {self.timestamp}")

    def values(self):
        """KPI values in canonical order as a float array, NaN for absent."""
        return np.array(
            [math.nan if getattr(self, n) is None else float(getattr(self, n)) for n in KPI_NAMES]
        )


@dataclass
class KpiFrame:
    """Uniformly spaced aggregated KPI table.

    ``steps`` holds strictly increasing window indices; row i sits at
    timestamp ``t_start + steps[i] * t_step``.  ``values`` is (len(steps),
    13) with NaN marking absent KPIs.
    """

    steps: np.ndarray
    values: np.ndarray
    t_start: float
    t_step: float
    window_len: float
    column_stats: dict | None = None

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.steps.size, N_KPIS):
            raise ParameterError(
                f"values shape {self.values.shape} does not match {self.steps.size} rows x {N_KPIS} KPIs"
            )
        if self.steps.size and np.any(np.diff(self.steps) <= 0):
            # duplicate aggregation timestamps: keep the later row
            warnings.warn("duplicate or unordered frame steps; keeping the last row per step")
            _, last_idx = np.unique(self.steps[::-1], return_index=True)
            keep = self.steps.size - 1 - last_idx
            keep.sort()
            self.steps = self.steps[keep]
            self.values = self.values[keep]

    def __len__(self):
        return self.steps.size

    @property
    def timestamps(self):
        return self.t_start + self.steps * self.t_step

    def records(self):
        """Materialize rows as KpiRecord objects (NaN -> absent)."""
        out = []
        for ts, row in zip(self.timestamps, self.values):
            fields = {n: (None if math.isnan(v) else float(v)) for n, v in zip(KPI_NAMES, row)}
            out.append(KpiRecord(timestamp=float(ts), **fields))
        return out


@dataclass
class Normalization:
    """Per-KPI affine transform: normalized = (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, arr):
        return (np.asarray(arr, dtype=np.float64) - self.mean) / self.std

    def invert(self, arr):
        return np.asarray(arr, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], float), std=np.asarray(d["std"], float))


@dataclass
class SequenceDataset:
    """Paired (X_j in R^{seq_len x 13}, Y_j in R^13) samples.

    ``sample_steps[j]`` is the window index of the LAST input row of X_j, so
    X_j covers steps sample_steps[j]-seq_len+1 .. sample_steps[j] and Y_j is
    the row at sample_steps[j]+1.
    """

    inputs: np.ndarray   # (M, seq_len, 13)
    targets: np.ndarray  # (M, 13)
    seq_len: int
    sample_steps: np.ndarray
    normalization: Normalization | None = None

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    def subset(self, indices):
        return SequenceDataset(
            inputs=self.inputs[indices],
            targets=self.targets[indices],
            seq_len=self.seq_len,
            sample_steps=self.sample_steps[indices],
            normalization=self.normalization,
        )


# -- parsing -------------------------------------------------------------------

@dataclass
class ParseResult:
    records: list
    dropped_rows: int


def parse_kpi_log(path, schema=None):
    """Read a delimited KPI log into records.

    ``schema`` maps canonical KPI names (plus "timestamp") to the column
    names used in the file; identity by default.  Cells that fail numeric
    parsing become absent fields; rows without a parseable timestamp are
    dropped and counted.
    """
    path = Path(path)
    columns = {name: name for name in ("timestamp",) + KPI_NAMES}
    if schema:
        unknown = set(schema) - set(columns)
        if unknown:
            raise SchemaError(f"schema maps unknown KPI names: {sorted(unknown)}")
        columns.update(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canonical, col in columns.items():
            if col not in header:
                raise SchemaError(f"header is missing column '{col}' (for '{canonical}')")
        records = []
        dropped = 0
        for row in reader:
            ts = _parse_cell(row.get(columns["timestamp"]))
            if ts is None or not math.isfinite(ts) or ts < 0:
                dropped += 1
                continue
            fields = {name: _parse_cell(row.get(columns[name])) for name in KPI_NAMES}
            records.append(KpiRecord(timestamp=ts, **fields))
    return ParseResult(records=records, dropped_rows=dropped)


def _parse_cell(cell):
    if cell is None:
        return None
    cell = cell.strip()
    if not cell:
        return None
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def write_kpi_log(records, path):
    """Emit records in the delimited format ``parse_kpi_log`` consumes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("timestamp",) + KPI_NAMES)
        for rec in records:
            row = [repr(float(rec.timestamp))]
            for name in KPI_NAMES:
                v = getattr(rec, name)
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)


# -- aggregation ----------------------------------------------------------------

def moving_average(records, window_len=DEFAULT_WINDOW_LEN_MS, t_step=DEFAULT_T_STEP_MS):
    """Average each KPI over sliding windows [t_start, t_start + window_len).

    Windows advance by ``t_step`` from the first (sorted) timestamp; each
    populated window becomes one frame row stamped with the window start.
    Windows where a KPI has no present values leave that KPI absent; fully
    empty windows are omitted.
    """
    if window_len <= 0 or t_step <= 0:
        raise ParameterError(f"window_len and t_step must be positive, got {window_len}, {t_step}")
    records = sorted(records, key=lambda r: r.timestamp)
    if not records:
        return KpiFrame(steps=np.zeros(0, np.int64), values=np.zeros((0, N_KPIS)),
                        t_start=0.0, t_step=float(t_step), window_len=float(window_len))
    ts = np.array([r.timestamp for r in records])
    vals = np.stack([r.values() for r in records])
    t0 = float(ts[0])
    n_windows = int(math.floor((ts[-1] - t0) / t_step)) + 1

    sums = np.zeros((n_windows, N_KPIS))
    counts = np.zeros((n_windows, N_KPIS), dtype=np.int64)
    rel = (ts - t0) / t_step
    span = window_len / t_step
    k_last = np.floor(rel).astype(np.int64)              # last window starting at or before t
    k_first = np.floor(rel - span).astype(np.int64) + 1  # first window still covering t
    present = ~np.isnan(vals)
    filled = np.where(present, vals, 0.0)
    for offset in range(int(math.ceil(span))):
        k = k_first + offset
        live = (k <= k_last) & (k >= 0) & (k < n_windows)
        if not live.any():
            continue
        np.add.at(sums, k[live], filled[live])
        np.add.at(counts, k[live], present[live])

    out = np.full((n_windows, N_KPIS), np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    keep = (counts > 0).any(axis=1)
    return KpiFrame(steps=np.nonzero(keep)[0].astype(np.int64), values=out[keep],
                    t_start=t0, t_step=float(t_step), window_len=float(window_len))


# -- filtering -------------------------------------------------------------------

@dataclass
class FillResult:
    frame: KpiFrame
    filled_rows: int
    dropped_rows: int


def fill_and_filter(frame):
    """Resolve missing values: rows missing only packet_delay are kept with
    the -1 sentinel; rows missing any other KPI are dropped."""
    missing = np.isnan(frame.values)
    others = np.delete(missing, PACKET_DELAY_IDX, axis=1)
    drop = others.any(axis=1)
    fill = ~drop & missing[:, PACKET_DELAY_IDX]
    values = frame.values.copy()
    values[fill, PACKET_DELAY_IDX] = DELAY_SENTINEL
    keep = ~drop
    new = replace(frame, steps=frame.steps[keep], values=values[keep])
    return FillResult(frame=new, filled_rows=int(fill.sum()), dropped_rows=int(drop.sum()))


@dataclass
class IqrResult:
    frame: KpiFrame
    lower: np.ndarray
    upper: np.ndarray
    removed_rows: int
    warned: bool


def iqr_filter(frame, lower_pct=10.0, upper_pct=90.0, bounds=None):
    """Drop rows holding a value outside [Q1 - 1.5*IQR, Q3 + 1.5*IQR] in any
    column, with Q1/Q3 the lower_pct/upper_pct percentiles (linear
    interpolation between order statistics).

    packet_delay sentinels (-1) are excluded from that column's percentile
    computation and never cause removal.  ``bounds`` (lower, upper arrays)
    reuses thresholds frozen from an earlier pass.
    """
    if not (0 <= lower_pct < upper_pct <= 100):
        raise ParameterError(f"invalid percentile range [{lower_pct}, {upper_pct}]")
    if len(frame) < 2:
        warnings.warn("iqr_filter: fewer than 2 rows, returning frame unchanged")
        nan = np.full(N_KPIS, np.nan)
        return IqrResult(frame=frame, lower=nan, upper=nan, removed_rows=0, warned=True)

    values = frame.values
    if bounds is None:
        lower = np.empty(N_KPIS)
        upper = np.empty(N_KPIS)
        for j in range(N_KPIS):
            col = values[:, j]
            if j == PACKET_DELAY_IDX:
                col = col[col != DELAY_SENTINEL]
            if col.size == 0:
                lower[j], upper[j] = -np.inf, np.inf
                continue
            q1 = np.percentile(col, lower_pct)
            q3 = np.percentile(col, upper_pct)
            iqr = q3 - q1
            lower[j] = q1 - 1.5 * iqr
            upper[j] = q3 + 1.5 * iqr
    else:
        lower, upper = (np.asarray(b, dtype=np.float64) for b in bounds)

    out_of_range = (values < lower) | (values > upper)
    out_of_range[:, PACKET_DELAY_IDX] &= values[:, PACKET_DELAY_IDX] != DELAY_SENTINEL
    drop = out_of_range.any(axis=1)
    keep = ~drop
    new = replace(frame, steps=frame.steps[keep], values=values[keep])
    return IqrResult(frame=new, lower=lower, upper=upper,
                     removed_rows=int(drop.sum()), warned=False)


# -- sequence construction --------------------------------------------------------

def build_sequences(frame, n_seq=DEFAULT_SEQ_LEN):
    """Extract all stride-1 (X: n_seq x 13, Y: next row) pairs whose n_seq+1
    source rows sit at consecutive window indices."""
    if n_seq < 1:
        raise ParameterError(f"n_seq must be >= 1, got {n_seq}")
    steps = frame.steps
    n_rows = steps.size
    if n_rows < n_seq + 1:
        return SequenceDataset(
            inputs=np.zeros((0, n_seq, N_KPIS)), targets=np.zeros((0, N_KPIS)),
            seq_len=n_seq, sample_steps=np.zeros(0, np.int64))
    consec = np.diff(steps) == 1
    # run length of consecutive diffs ending at each index
    idx = np.arange(consec.size)
    last_break = np.maximum.accumulate(np.where(~consec, idx, -1))
    run = np.where(consec, idx - last_break, 0)
    # emit at diff index i when the n_seq diffs ending there are all consecutive:
    # rows i-n_seq+1 .. i feed X and row i+1 is Y
    emit = np.nonzero(run >= n_seq)[0]
    if emit.size == 0:
        return SequenceDataset(
            inputs=np.zeros((0, n_seq, N_KPIS)), targets=np.zeros((0, N_KPIS)),
            seq_len=n_seq, sample_steps=np.zeros(0, np.int64))
    starts = emit - n_seq + 1
    gather = starts[:, None] + np.arange(n_seq)[None, :]
    inputs = frame.values[gather]
    targets = frame.values[emit + 1]
    return SequenceDataset(inputs=inputs, targets=targets, seq_len=n_seq,
                           sample_steps=steps[emit])


def normalize_dataset(ds, stats_source):
    """Z-score each KPI column using mean/std (population) computed only from
    the X rows of the ``stats_source`` sample indices; the same affine map is
    applied to inputs and targets."""
    idx = np.asarray(stats_source, dtype=np.int64)
    if idx.size == 0:
        raise ParameterError("stats_source must be a non-empty set of sample indices")
    rows = ds.inputs[idx].reshape(-1, N_KPIS)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)  # population std
    std = np.where(std < 1e-12, 1.0, std)
    norm = Normalization(mean=mean, std=std)
    return SequenceDataset(
        inputs=norm.apply(ds.inputs),
        targets=norm.apply(ds.targets),
        seq_len=ds.seq_len,
        sample_steps=ds.sample_steps.copy(),
        normalization=norm,
    )


# -- dataset container I/O ----------------------------------------------------------

DATASET_FORMAT = "kpiembed-dataset/1"


def save_dataset(ds, path, provenance=None):
    """Write a dataset directory: meta.json + inputs.npy/targets.npy/steps.npy."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "seq_len": ds.seq_len,
        "n_kpis": N_KPIS,
        "n_samples": ds.n_samples,
        "kpi_names": list(KPI_NAMES),
        "normalization": ds.normalization.to_dict() if ds.normalization else None,
        "provenance": provenance or {},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.save(path / "inputs.npy", ds.inputs)
    np.save(path / "targets.npy", ds.targets)
    np.save(path / "steps.npy", ds.sample_steps)


def load_dataset(path):
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise DataError(f"no dataset at {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {meta.get('format')!r}")
    norm = meta.get("normalization")
    return SequenceDataset(
        inputs=np.load(path / "inputs.npy"),
        targets=np.load(path / "targets.npy"),
        seq_len=meta["seq_len"],
        sample_steps=np.load(path / "steps.npy"),
        normalization=Normalization.from_dict(norm) if norm else None,
    )


@dataclass
class PreprocessReport:
    parsed_rows: int
    dropped_unparseable: int
    aggregated_rows: int
    filled_rows: int
    dropped_incomplete: int
    removed_outlier_rows: int
    n_samples: int

    def to_dict(self):
        return vars(self).copy()


def run_pipeline(records, window_len=DEFAULT_WINDOW_LEN_MS, t_step=DEFAULT_T_STEP_MS,
                 lower_pct=10.0, upper_pct=90.0, n_seq=DEFAULT_SEQ_LEN,
                 dropped_unparseable=0):
    """records -> (SequenceDataset, PreprocessReport), applying every stage."""
    frame = moving_average(records, window_len=window_len, t_step=t_step)
    filled = fill_and_filter(frame)
    iqr = iqr_filter(filled.frame, lower_pct=lower_pct, upper_pct=upper_pct)
    ds = build_sequences(iqr.frame, n_seq=n_seq)
    report = PreprocessReport(
        parsed_rows=len(records),
        dropped_unparseable=dropped_unparseable,
        aggregated_rows=len(frame),
        filled_rows=filled.filled_rows,
        dropped_incomplete=filled.dropped_rows,
        removed_outlier_rows=iqr.removed_rows,
        n_samples=ds.n_samples,
    )
    return ds, report
