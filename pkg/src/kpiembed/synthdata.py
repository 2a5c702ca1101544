"""Synthetic KPI streams with latent-factor dynamics and Table-1-like marginals.

A small set of latent factors (interference burst on/off process, slow
channel-fading AR(1), load sinusoid) drives all 13 KPIs through a loading
matrix; per-KPI affine maps are then calibrated on the generated trajectory
so sample means/stds approach the marginal spec while clipping keeps values
inside [min, max].  Integer-valued KPIs are rounded, with a shift
re-calibration so rounding does not bias the mean.

Everything is deterministic given the config seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import preprocess
from .errors import DataError, ParameterError
from .preprocess import KPI_NAMES, KpiRecord, N_KPIS

T_STEP_MS = 20.0  # raw logging cadence

INTEGER_KPIS = frozenset({"mimo_rank", "mcs", "rb_number", "cqi", "pmi"})
FACTOR_KINDS = ("burst", "fading", "sinusoid", "constant")

# Empirical marginal targets: (min, max, mean, std) per KPI.
_DEFAULT_MARGINALS = {
    "spectral_efficiency": (0.00, 3.74, 0.58, 0.38),
    "rsrp": (-102.0, -75.0, -87.58, 3.70),
    "sinr": (9.43, 24.33, 18.31, 1.92),
    "mimo_rank": (1.0, 2.0, 1.36, 0.38),
    "mcs": (0.0, 27.0, 9.04, 4.93),
    "rb_number": (2.0, 25.0, 22.31, 4.34),
    "cqi": (0.0, 13.0, 8.51, 0.92),
    "rsrq": (-14.00, -6.40, -10.55, 2.47),
    "pmi": (0.0, 3.0, 0.93, 0.84),
    "ue_rssi": (-70.0, -60.0, -65.36, 2.62),
    "ue_buffer_status": (0.0, 2944.0, 25.61, 85.34),
    "packet_delay": (0.0, 3048.06, 62.70, 208.87),
    "bler": (0.0, 78.00, 2.64, 6.76),
}

# Loadings of the three default factors (interference burst, channel fading,
# traffic-load sinusoid) onto each KPI; rows follow KPI_NAMES order.  Radio
# quality follows interference/fading; traffic KPIs follow the load cycle.
_DEFAULT_LOADINGS = np.array([
    # burst  fading  load
    [-0.85,  0.5,   0.0],   # spectral_efficiency
    [ 0.0,   1.0,   0.0],   # rsrp
    [-0.9,   0.6,   0.0],   # sinr
    [-0.5,   0.5,   0.0],   # mimo_rank
    [-0.8,   0.5,  -0.3],   # mcs
    [ 0.0,   0.0,   0.8],   # rb_number
    [-0.8,   0.6,   0.0],   # cqi
    [-0.9,   0.7,   0.0],   # rsrq
    [ 0.3,   0.4,   0.0],   # pmi
    [ 0.6,   0.8,   0.0],   # ue_rssi
    [ 0.5,   0.0,   0.7],   # ue_buffer_status
    [ 0.7,  -0.2,   0.5],   # packet_delay
    [ 0.9,  -0.3,   0.0],   # bler
])


# Disturbance groups: link adaptation, received power, spatial scheduling,
# traffic load, transport delay.  KPIs in one group share one noise process.
_NOISE_GROUPS = {
    "spectral_efficiency": 0, "sinr": 0, "mcs": 0, "cqi": 0, "bler": 0,
    "rsrp": 1, "ue_rssi": 1, "rsrq": 1,
    "mimo_rank": 2, "pmi": 2,
    "rb_number": 3, "ue_buffer_status": 3,
    "packet_delay": 4,
}


@dataclass(frozen=True)
class KpiMarginalSpec:
    """Per-KPI (min, max, mean, std) targets for the generator."""

    mins: np.ndarray
    maxs: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        for name in ("mins", "maxs", "means", "stds"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
            if getattr(self, name).shape != (N_KPIS,):
                raise ParameterError(f"{name} must have {N_KPIS} entries")
        bad = (self.mins > self.means) | (self.means > self.maxs) | (self.stds < 0)
        if bad.any():
            names = [KPI_NAMES[i] for i in np.nonzero(bad)[0]]
            raise ParameterError(f"marginal spec violates min <= mean <= max, std >= 0 for {names}")

    @classmethod
    def table_default(cls):
        rows = [_DEFAULT_MARGINALS[name] for name in KPI_NAMES]
        lo, hi, mu, sd = (np.array(col) for col in zip(*rows))
        return cls(mins=lo, maxs=hi, means=mu, stds=sd)

    def for_kpi(self, name):
        i = KPI_NAMES.index(name)
        return self.mins[i], self.maxs[i], self.means[i], self.stds[i]


@dataclass(frozen=True)
class LatentProcessConfig:
    """Latent dynamics, loadings, noise and corruption knobs; seeded."""

    n_factors: int = 3
    factor_kinds: tuple | None = None  # default cycles burst/fading/sinusoid
    burst_dwell_on_ms: float = 250.0
    burst_dwell_off_ms: float = 350.0
    fading_persistence: float = 0.93
    load_period_ms: float = 3000.0
    loadings: np.ndarray | None = None  # (13, n_factors)
    noise_std: float | np.ndarray = 0.7
    n_noise_components: int = 5
    noise_mixing: np.ndarray | None = None  # (13, n_noise_components), unit rows
    idiosyncratic_noise_frac: float = 0.0
    missing_prob: float | np.ndarray = 0.0
    delay_missing_prob: float = 0.25
    outlier_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_factors < 1:
            raise ParameterError("n_factors must be >= 1")
        if self.n_noise_components < 1:
            raise ParameterError("n_noise_components must be >= 1")
        if not (0.0 <= self.idiosyncratic_noise_frac <= 1.0):
            raise ParameterError("idiosyncratic_noise_frac must lie in [0, 1]")
        mixing = self.resolved_noise_mixing()
        if mixing.shape != (N_KPIS, self.n_noise_components):
            raise ParameterError(
                f"noise_mixing must be ({N_KPIS}, {self.n_noise_components}), got {mixing.shape}")
        if not np.all(np.isfinite(mixing)):
            raise ParameterError("noise_mixing must be finite")
        kinds = self.resolved_kinds()
        unknown = set(kinds) - set(FACTOR_KINDS)
        if unknown:
            raise ParameterError(f"unknown factor kinds: {sorted(unknown)}")
        lam = self.resolved_loadings()
        if lam.shape != (N_KPIS, self.n_factors):
            raise ParameterError(f"loadings must be ({N_KPIS}, {self.n_factors}), got {lam.shape}")
        if not np.all(np.isfinite(lam)):
            raise ParameterError("loadings must be finite")
        noise = self.resolved_noise()
        if np.any(noise < 0):
            raise ParameterError("noise std must be >= 0")
        probs = np.append(self.resolved_missing(), [self.delay_missing_prob, self.outlier_rate])
        if np.any((probs < 0) | (probs > 1)):
            raise ParameterError("probabilities must lie in [0, 1]")
        if not (0 < self.fading_persistence < 1):
            raise ParameterError("fading_persistence must lie in (0, 1)")
        if self.burst_dwell_on_ms <= 0 or self.burst_dwell_off_ms <= 0 or self.load_period_ms <= 0:
            raise ParameterError("dwell times and load period must be positive")

    def resolved_kinds(self):
        if self.factor_kinds is not None:
            return tuple(self.factor_kinds)
        return tuple(FACTOR_KINDS[i % 3] for i in range(self.n_factors))

    def resolved_loadings(self):
        if self.loadings is not None:
            return np.asarray(self.loadings, dtype=np.float64)
        if self.n_factors <= 3:
            return _DEFAULT_LOADINGS[:, : self.n_factors].copy()
        extra = np.tile(_DEFAULT_LOADINGS, (1, math.ceil(self.n_factors / 3)))
        return extra[:, : self.n_factors].copy()

    def resolved_noise(self):
        return np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), (N_KPIS,)).copy()

    def resolved_noise_mixing(self):
        if self.noise_mixing is not None:
            return np.asarray(self.noise_mixing, dtype=np.float64)
        if self.n_noise_components == 5:
            # default: disturbances are shared within physically related KPI
            # groups (redundant-KPI premise), one noise process per group
            c = np.zeros((N_KPIS, 5))
            for j, name in enumerate(KPI_NAMES):
                c[j, _NOISE_GROUPS[name]] = 1.0
            return c
        rng = np.random.default_rng(0xC0)
        c = rng.normal(size=(N_KPIS, self.n_noise_components))
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    def resolved_missing(self):
        return np.broadcast_to(np.asarray(self.missing_prob, dtype=np.float64), (N_KPIS,)).copy()


# -- latent factor trajectories -------------------------------------------------

def _burst_factor(n_steps, cfg, rng):
    """Two-state semi-Markov on/off process, standardized."""
    mean_on = max(cfg.burst_dwell_on_ms / T_STEP_MS, 1.0)
    mean_off = max(cfg.burst_dwell_off_ms / T_STEP_MS, 1.0)
    x = np.empty(n_steps)
    pos = 0
    state = rng.random() < mean_on / (mean_on + mean_off)
    while pos < n_steps:
        dwell = max(1, int(round(rng.exponential(mean_on if state else mean_off))))
        x[pos: pos + dwell] = 1.0 if state else 0.0
        pos += dwell
        state = not state
    p = mean_on / (mean_on + mean_off)
    return (x - p) / math.sqrt(p * (1.0 - p))


def _fading_factor(n_steps, cfg, rng):
    """Stationary AR(1) with unit variance (slow channel fading)."""
    a = cfg.fading_persistence
    eps = rng.standard_normal(n_steps)
    x = np.empty(n_steps)
    x[0] = eps[0]
    scale = math.sqrt(1.0 - a * a)
    for t in range(1, n_steps):
        x[t] = a * x[t - 1] + scale * eps[t]
    return x


def _sinusoid_factor(n_steps, cfg, rng):
    phase = rng.uniform(0.0, 2.0 * math.pi)
    t = np.arange(n_steps) * T_STEP_MS
    return math.sqrt(2.0) * np.sin(2.0 * math.pi * t / cfg.load_period_ms + phase)


def generate_factors(cfg, n_steps):
    """Standardized latent trajectories, shape (n_steps, n_factors)."""
    kinds = cfg.resolved_kinds()
    cols = []
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng([cfg.seed, 10 + i])
        if kind == "burst":
            cols.append(_burst_factor(n_steps, cfg, rng))
        elif kind == "fading":
            cols.append(_fading_factor(n_steps, cfg, rng))
        elif kind == "sinusoid":
            cols.append(_sinusoid_factor(n_steps, cfg, rng))
        else:  # constant
            cols.append(np.zeros(n_steps))
    return np.stack(cols, axis=1)


# -- marginal calibration ---------------------------------------------------------

_CALIBRATION_SAMPLE = 30000


def _calibrate_column(z, lo, hi, mu, sd, is_integer):
    """Fit clip(a + b z, lo, hi) (plus rounding for integer KPIs) so the
    sample mean/std of the transformed trajectory approach (mu, sd).

    Nested bisection: for any gain b the clipped mean is monotone in the
    offset a, and with the mean pinned the clipped std grows with b.  Fitting
    uses a prefix of the trajectory; the map is applied to all of it.
    """
    zs = z[:_CALIBRATION_SAMPLE]
    if zs.std() < 1e-12:  # degenerate trajectory: only the mean is shapeable
        a, b = mu, 0.0
    else:
        amp = float(np.abs(zs).max()) + 1.0

        def solve_offset(b):
            a_lo, a_hi = lo - b * amp - 1.0, hi + b * amp + 1.0
            for _ in range(40):
                mid = 0.5 * (a_lo + a_hi)
                if np.clip(mid + b * zs, lo, hi).mean() < mu:
                    a_lo = mid
                else:
                    a_hi = mid
            return 0.5 * (a_lo + a_hi)

        if sd <= 0:
            b = 0.0
        else:
            b_lo, b_hi = 0.0, 50.0 * sd
            for _ in range(30):
                mid = 0.5 * (b_lo + b_hi)
                s = np.clip(solve_offset(mid) + mid * zs, lo, hi).std()
                if s < sd:
                    b_lo = mid
                else:
                    b_hi = mid
            b = 0.5 * (b_lo + b_hi)
        a = solve_offset(b)
    if not is_integer:
        return np.clip(a + b * z, lo, hi)

    def rounded(shift, zz):
        return np.round(np.clip(a + shift + b * zz, lo, hi))

    width = max(hi - lo, 1.0)
    shift_lo, shift_hi = -width, width
    if rounded(shift_lo, zs).mean() > mu or rounded(shift_hi, zs).mean() < mu:
        return rounded(0.0, z)  # mean unreachable (degenerate trajectory); keep centered fit
    for _ in range(60):
        mid = 0.5 * (shift_lo + shift_hi)
        if rounded(mid, zs).mean() < mu:
            shift_lo = mid
        else:
            shift_hi = mid
    best = min((shift_lo, shift_hi, 0.5 * (shift_lo + shift_hi)),
               key=lambda sh: abs(rounded(sh, zs).mean() - mu))
    return rounded(best, z)


# -- stream generation ---------------------------------------------------------------

def generate_stream_arrays(cfg, spec, duration_ms):
    """Internal: (timestamps, values (n,13) with NaN for missing, factors)."""
    if duration_ms < T_STEP_MS:
        raise ParameterError(f"duration must be >= {T_STEP_MS} ms, got {duration_ms}")
    n_steps = int(duration_ms // T_STEP_MS)
    factors = generate_factors(cfg, n_steps)
    lam = cfg.resolved_loadings()
    noise_std = cfg.resolved_noise()

    noise_rng = np.random.default_rng([cfg.seed, 1])
    mixing = cfg.resolved_noise_mixing()
    shared = noise_rng.standard_normal((n_steps, cfg.n_noise_components)) @ mixing.T
    idio = noise_rng.standard_normal((n_steps, N_KPIS))
    frac = cfg.idiosyncratic_noise_frac
    eps = (math.sqrt(1.0 - frac) * shared + math.sqrt(frac) * idio) * noise_std
    raw = factors @ lam.T + eps
    denom = np.sqrt((lam ** 2).sum(axis=1) + noise_std ** 2)
    z = raw / np.where(denom < 1e-12, 1.0, denom)

    values = np.empty_like(z)
    for j, name in enumerate(KPI_NAMES):
        values[:, j] = _calibrate_column(
            z[:, j], spec.mins[j], spec.maxs[j], spec.means[j], spec.stds[j],
            name in INTEGER_KPIS)

    if cfg.outlier_rate > 0:
        out_rng = np.random.default_rng([cfg.seed, 3])
        mask = out_rng.random((n_steps, N_KPIS)) < cfg.outlier_rate
        center = 0.5 * (spec.mins + spec.maxs)
        width = spec.maxs - spec.mins
        # outside the normal range but inside a 3x expansion of it
        magnitude = out_rng.uniform(0.55, 1.5, size=(n_steps, N_KPIS)) * width
        sign = np.where(out_rng.random((n_steps, N_KPIS)) < 0.5, -1.0, 1.0)
        spikes = center + sign * magnitude
        for j, name in enumerate(KPI_NAMES):
            if name in INTEGER_KPIS:
                spikes[:, j] = np.round(spikes[:, j])
        values = np.where(mask, spikes, values)

    miss_rng = np.random.default_rng([cfg.seed, 2])
    missing = miss_rng.random((n_steps, N_KPIS)) < cfg.resolved_missing()
    delay_missing = miss_rng.random(n_steps) < cfg.delay_missing_prob
    missing[:, preprocess.PACKET_DELAY_IDX] |= delay_missing
    values = np.where(missing, np.nan, values)

    timestamps = np.arange(n_steps) * T_STEP_MS
    return timestamps, values, factors


def generate_stream(cfg, spec, duration_ms):
    """Generate one KPI record every 20 ms for ``duration_ms``."""
    timestamps, values, _ = generate_stream_arrays(cfg, spec, duration_ms)
    records = []
    for ts, row in zip(timestamps, values):
        fields = {n: (None if math.isnan(v) else float(v)) for n, v in zip(KPI_NAMES, row)}
        records.append(KpiRecord(timestamp=float(ts), **fields))
    return records


def generate_labeled_dataset(cfg, spec, n_samples, window_len=preprocess.DEFAULT_WINDOW_LEN_MS,
                             t_step=preprocess.DEFAULT_T_STEP_MS, lower_pct=10.0,
                             upper_pct=90.0, n_seq=preprocess.DEFAULT_SEQ_LEN):
    """Run a stream through the full preprocessing pipeline until it yields at
    least ``n_samples`` (X, Y) pairs, then truncate to exactly that many."""
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    base_steps = n_samples + n_seq + 50
    for attempt in range(7):
        duration = base_steps * T_STEP_MS * (1.4 ** attempt) + window_len
        timestamps, values, _ = generate_stream_arrays(cfg, spec, duration)
        records = _records_from_arrays(timestamps, values)
        ds, _ = preprocess.run_pipeline(records, window_len=window_len, t_step=t_step,
                                        lower_pct=lower_pct, upper_pct=upper_pct, n_seq=n_seq)
        if ds.n_samples >= n_samples:
            return ds.subset(np.arange(n_samples))
    raise DataError(
        f"could not produce {n_samples} samples after {attempt + 1} attempts; "
        "reduce missingness/outlier rates or request fewer samples")


def _records_from_arrays(timestamps, values):
    records = []
    for ts, row in zip(timestamps, values):
        fields = {n: (None if math.isnan(v) else float(v)) for n, v in zip(KPI_NAMES, row)}
        records.append(KpiRecord(timestamp=float(ts), **fields))
    return records
