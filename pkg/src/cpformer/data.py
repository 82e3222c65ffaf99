"""Dataset ingestion, label mapping, splitting and a parametric synthetic ECG generator."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import CLASS_NAMES, LEAD_NAMES
from .errors import ConfigurationError, InputError
from .preprocess import LeadMask, RawSignal, preprocess_many

N_CLASSES = len(CLASS_NAMES)


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray  # [12, L] preprocessed
    labels: np.ndarray  # [6] in {0, 1}
    lead_mask: LeadMask = field(default_factory=LeadMask)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.shape != (N_CLASSES,):
            raise InputError(f"{self.id}: label vector must have length {N_CLASSES}")


def signal_matrix(records) -> np.ndarray:
    return np.stack([r.signal for r in records])


def label_matrix(records) -> np.ndarray:
    return np.stack([r.labels for r in records])


# ---------------------------------------------------------------------------
# label map and CSV ingestion

class LabelMap(dict):
    """Diagnostic code -> category index (0-based)."""

    def encode(self, codes) -> np.ndarray:
        unknown = [c for c in codes if c not in self]
        if unknown:
            raise InputError(f"unmapped code(s): {', '.join(unknown)}")
        y = np.zeros(N_CLASSES)
        for c in codes:
            y[self[c]] = 1.0
        return y


def load_label_map(path: str | os.PathLike | None = None) -> LabelMap:
    if path is None:
        text = resources.files("cpformer.resources").joinpath("labelmap.csv").read_text()
    else:
        text = Path(path).read_text()
    out = LabelMap()
    for row in csv.DictReader(text.splitlines()):
        code = row["code"].strip()
        idx = int(row["category_index"])
        if not 0 <= idx < N_CLASSES:
            raise ConfigurationError(f"label map: code {code} has category {idx} outside 0..{N_CLASSES - 1}")
        if code in out and out[code] != idx:
            raise ConfigurationError(f"label map: code {code} mapped to two categories")
        out[code] = idx
    return out


@dataclass
class RawRecord:
    id: str
    raw: RawSignal
    labels: np.ndarray
    codes: list
    meta: dict = field(default_factory=dict)


@dataclass
class LoadResult:
    records: list
    rejected: list  # (id, reason)

    def report(self) -> str:
        return "\n".join(f"{rid}: {why}" for rid, why in self.rejected)


def read_signal_csv(path: str | os.PathLike) -> np.ndarray:
    """A 12-column CSV with lead-name header -> [12, L] in canonical lead order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [row for row in reader if row]
    if len(header) != len(LEAD_NAMES):
        raise InputError(f"expected {len(LEAD_NAMES)} columns, found {len(header)}")
    if sorted(header) != sorted(LEAD_NAMES):
        raise InputError(f"columns must be the lead names {list(LEAD_NAMES)}, got {header}")
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"non-numeric sample: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(LEAD_NAMES):
        raise InputError("ragged rows")
    if not np.all(np.isfinite(data)):
        raise InputError("NaN or infinite sample")
    order = [header.index(n) for n in LEAD_NAMES]
    return data[:, order].T.copy()


def write_signal_csv(path: str | os.PathLike, leads: np.ndarray) -> None:
    np.savetxt(path, np.asarray(leads).T, delimiter=",", header=",".join(LEAD_NAMES), comments="", fmt="%.6f")


def read_labels_csv(path) -> dict[str, list[str]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            codes = [c.strip() for c in (row.get("codes") or "").split(";") if c.strip()]
            out[row["id"].strip()] = codes
    return out


def load_dataset(signals_dir, labels_path, label_map: LabelMap | None = None,
                 sample_rate_hz: float = 500.0) -> LoadResult:
    """Parse ``<id>.csv`` signals plus ``labels.csv``; bad records are rejected, not dropped silently."""
    label_map = label_map if label_map is not None else load_label_map()
    records, rejected = [], []
    for rid, codes in read_labels_csv(labels_path).items():
        try:
            if not codes:
                raise InputError("no diagnostic codes")
            y = label_map.encode(codes)
            path = Path(signals_dir) / f"{rid}.csv"
            if not path.exists():
                raise InputError(f"missing signal file {path.name}")
            raw = RawSignal(read_signal_csv(path), sample_rate_hz)
        except InputError as exc:
            rejected.append((rid, str(exc)))
            continue
        records.append(RawRecord(rid, raw, y, codes))
    return LoadResult(records, rejected)


def preprocess_records(raw_records, target_hz: float = 100.0, length: int | None = None) -> list[EcgRecord]:
    """Run the conditioning pipeline; ``length`` crops or zero-pads to a fixed sample count."""
    sigs = preprocess_many([r.raw for r in raw_records], target_hz)
    out = []
    for r, s in zip(raw_records, sigs):
        if length is not None:
            s = fit_length(s, length)
        out.append(EcgRecord(r.id, s, r.labels, meta=r.meta))
    return out


def fit_length(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[-1] >= length:
        return np.ascontiguousarray(x[..., :length])
    pad = np.zeros(x.shape[:-1] + (length - x.shape[-1],))
    return np.concatenate([x, pad], axis=-1)


# ---------------------------------------------------------------------------
# processed dataset persistence

def save_processed(directory, records) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nx.save_array(d / "signals.bin", signal_matrix(records), "signals")
    with open(d / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *CLASS_NAMES])
        for r in records:
            w.writerow([r.id, *[int(v) for v in r.labels]])
    metas = {r.id: r.meta for r in records if r.meta}
    if metas:
        (d / "meta.json").write_text(json.dumps(metas))


def load_processed(directory) -> list[EcgRecord]:
    d = Path(directory)
    sig = nx.load_array(d / "signals.bin")
    with open(d / "index.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != sig.shape[0]:
        raise InputError(f"{d}: index has {len(rows)} rows but signals hold {sig.shape[0]}")
    metas = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    return [EcgRecord(row["id"], sig[i], [float(row[c]) for c in CLASS_NAMES], meta=metas.get(row["id"], {}))
            for i, row in enumerate(rows)]


# ---------------------------------------------------------------------------
# synthetic generator

LIMB_ANGLES_DEG = np.array([0.0, 60.0, 120.0, -150.0, -30.0, 90.0])
PRECORDIAL_QRS = np.array([-0.7, -0.3, 0.4, 1.0, 0.9, 0.7])
# P, T and ST deflection per lead; aVR inverted
WAVE_LEAD_SCALE = np.array([0.5, 1.0, 0.5, -0.75, 0.25, 0.75, 0.4, 0.6, 0.8, 1.0, 0.9, 0.7])

P_OFFSET_S = -0.16
P_WIDTH_S = 0.040
T_WIDTH_S = 0.120
ST_WINDOW_S = (0.040, 0.120)
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

IRREGULAR_JITTER = 0.1
WIDE_QRS_MS = 120.0
ST_SHIFT_MV = 0.1
LEFT_AXIS_DEG = -30.0


@dataclass
class SynthSpec:
    """Parameters of one synthetic recording. Wave widths are full widths at half maximum."""

    heart_rate_bpm: float = 75.0
    p_amp: float = 0.15
    qrs_amp: float = 1.0
    t_amp: float = 0.3
    qrs_width_ms: float = 90.0
    st_offset_mv: float = 0.0
    noise_std: float = 0.02
    duration_s: float = 10.0
    seed: int = 0
    rr_jitter: float = 0.0
    qrs_axis_deg: float = 45.0
    start_offset_s: float = 0.3
    sample_rate_hz: float = 500.0

    def __post_init__(self):
        if not 20.0 <= self.heart_rate_bpm <= 250.0:
            raise ConfigurationError(f"heart rate {self.heart_rate_bpm} outside 20-250 bpm")
        if self.duration_s < 2.0:
            raise ConfigurationError(f"duration {self.duration_s} s shorter than 2 s")
        vals = [self.p_amp, self.qrs_amp, self.t_amp, self.st_offset_mv, self.noise_std,
                self.qrs_width_ms, self.rr_jitter, self.qrs_axis_deg, self.start_offset_s]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("synthetic parameters must be finite")
        if self.qrs_width_ms <= 0 or self.noise_std < 0 or self.rr_jitter < 0:
            raise ConfigurationError("qrs width must be positive; noise and jitter non-negative")

    @property
    def rr_s(self) -> float:
        return 60.0 / self.heart_rate_bpm


def synth_labels(spec: SynthSpec) -> np.ndarray:
    """Archetype rules. Regular rhythms carry a sinus label chosen by rate;
    irregular ones are supraventricular; wide QRS, ST shift and left axis
    deviation add labels 3, 4 and 5."""
    y = np.zeros(N_CLASSES)
    regular = spec.rr_jitter < IRREGULAR_JITTER
    if regular:
        y[0 if spec.heart_rate_bpm < 60.0 else 1] = 1.0
    else:
        y[2] = 1.0
    if spec.qrs_width_ms >= WIDE_QRS_MS:
        y[3] = 1.0
    if abs(spec.st_offset_mv) >= ST_SHIFT_MV:
        y[4] = 1.0
    if spec.qrs_axis_deg < LEFT_AXIS_DEG:
        y[5] = 1.0
    return y


def synth_codes(spec: SynthSpec) -> list[str]:
    """Diagnostic codes consistent with :func:`synth_labels` under the shipped label map."""
    y = synth_labels(spec)
    codes = []
    if y[0]:
        codes.append("SB")
    if y[1]:
        codes.append("ST" if spec.heart_rate_bpm > 100 else "SR")
    if y[2]:
        codes.append("AFIB")
    if y[3]:
        codes.append("IVB")
    if y[4]:
        codes.append("STE" if spec.st_offset_mv > 0 else "STDD")
    if y[5]:
        codes.append("ALS")
    return codes


def qrs_lead_scale(axis_deg: float) -> np.ndarray:
    limb = np.cos(np.deg2rad(axis_deg - LIMB_ANGLES_DEG))
    return np.concatenate([limb, PRECORDIAL_QRS])


def beat_times(spec: SynthSpec) -> np.ndarray:
    """QRS centre times (s), including one beat before and after the window."""
    rng = np.random.Generator(np.random.PCG64([spec.seed, 1]))
    rr = spec.rr_s
    times = [spec.start_offset_s - rr]
    while times[-1] < spec.duration_s + rr:
        step = rr * (1.0 + spec.rr_jitter * rng.normal()) if spec.rr_jitter > 0 else rr
        times.append(times[-1] + float(np.clip(step, 0.5 * rr, 1.6 * rr)))
    return np.array(times)


def _bump(t: np.ndarray, centre: float, fwhm: float) -> np.ndarray:
    sigma = fwhm * FWHM_TO_SIGMA
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2)


def synth_ecg(spec: SynthSpec, noise: bool = True) -> RawSignal:
    """Sum-of-Gaussians 12-lead ECG in millivolts at ``spec.sample_rate_hz``."""
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    t = np.arange(n) / fs
    p_wave = np.zeros(n)
    qrs = np.zeros(n)
    t_wave = np.zeros(n)
    st = np.zeros(n)
    t_delay = 0.3 * math.sqrt(spec.rr_s)
    for c in beat_times(spec):
        if spec.p_amp:
            p_wave += spec.p_amp * _bump(t, c + P_OFFSET_S, P_WIDTH_S)
        qrs += spec.qrs_amp * _bump(t, c, spec.qrs_width_ms / 1000.0)
        t_wave += spec.t_amp * _bump(t, c + t_delay, T_WIDTH_S)
        if spec.st_offset_mv:
            st[(t >= c + ST_WINDOW_S[0]) & (t < c + ST_WINDOW_S[1])] += spec.st_offset_mv
    leads = (np.outer(WAVE_LEAD_SCALE, p_wave + t_wave + st)
             + np.outer(qrs_lead_scale(spec.qrs_axis_deg), qrs))
    if noise and spec.noise_std > 0:
        rng = np.random.Generator(np.random.PCG64([spec.seed, 2]))
        leads = leads + rng.normal(0.0, spec.noise_std, leads.shape)
    return RawSignal(leads, fs)


def st_token_windows(spec: SynthSpec, n_tokens: int, token_seconds: float) -> np.ndarray:
    """Boolean [n_tokens] marking tokens that overlap any post-QRS ST window."""
    mark = np.zeros(n_tokens, dtype=bool)
    starts = np.arange(n_tokens) * token_seconds
    ends = starts + token_seconds
    for c in beat_times(spec):
        lo, hi = c + ST_WINDOW_S[0], c + ST_WINDOW_S[1]
        mark |= (starts < hi) & (ends > lo)
    return mark


def sample_synth_spec(rng: nx.Rng, duration_s: float, seed: int, rhythm: str | None = None,
                      wide_qrs: bool | None = None, st_shift: bool | None = None,
                      left_axis: bool | None = None, noise_std: float | None = None) -> SynthSpec:
    """Draw a spec from the toy archetype mix; unset flags are drawn at random."""
    rhythm = rhythm or ["brady", "normal", "irregular"][int(rng.integers(3))]
    wide_qrs = bool(rng.uniform() < 0.3) if wide_qrs is None else wide_qrs
    st_shift = bool(rng.uniform() < 0.3) if st_shift is None else st_shift
    left_axis = bool(rng.uniform() < 0.25) if left_axis is None else left_axis
    p_amp = float(rng.uniform(0.1, 0.2))
    jitter = 0.0
    if rhythm == "brady":
        hr = rng.uniform(40.0, 52.0)
    elif rhythm == "normal":
        hr = rng.uniform(68.0, 140.0)
    elif rhythm == "irregular":
        hr = rng.uniform(70.0, 130.0)
        jitter = rng.uniform(0.15, 0.25)
        p_amp = 0.0
    else:
        raise ConfigurationError(f"unknown rhythm archetype '{rhythm}'")
    if st_shift:
        st = float(rng.uniform(0.15, 0.3)) * (1.0 if rng.uniform() < 0.5 else -1.0)
    else:
        st = float(rng.uniform(-0.03, 0.03))
    return SynthSpec(
        heart_rate_bpm=float(hr),
        p_amp=p_amp,
        qrs_amp=float(rng.uniform(0.8, 1.5)),
        t_amp=float(rng.uniform(0.2, 0.4)),
        qrs_width_ms=float(rng.uniform(130.0, 160.0) if wide_qrs else rng.uniform(70.0, 100.0)),
        st_offset_mv=st,
        noise_std=float(rng.uniform(0.01, 0.04)) if noise_std is None else noise_std,
        duration_s=duration_s,
        seed=seed,
        rr_jitter=float(jitter),
        qrs_axis_deg=float(rng.uniform(-70.0, -45.0) if left_axis else rng.uniform(0.0, 75.0)),
        start_offset_s=float(rng.uniform(0.0, 60.0 / hr)),
    )


def synth_corpus(n: int, seed: int = 0, duration_s: float = 2.56, **overrides) -> list[RawRecord]:
    """``n`` labeled synthetic raw records drawn from the archetype mix."""
    rng = nx.Rng(seed)
    out = []
    for i in range(n):
        spec = sample_synth_spec(rng, duration_s, seed=seed * 100003 + i, **overrides)
        out.append(RawRecord(f"syn{seed}_{i:05d}", synth_ecg(spec), synth_labels(spec),
                             synth_codes(spec), {"synth": asdict(spec)}))
    return out


def synth_dataset(n: int, seed: int = 0, length: int = 256, **overrides) -> list[EcgRecord]:
    """Preprocessed synthetic records of exactly ``length`` samples at 100 Hz."""
    duration = max(2.0, length / 100.0)
    return preprocess_records(synth_corpus(n, seed, duration, **overrides), 100.0, length)


def write_raw_corpus(directory, raw_records) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "codes"])
        for r in raw_records:
            write_signal_csv(d / f"{r.id}.csv", r.raw.leads)
            w.writerow([r.id, ";".join(r.codes)])
    metas = {r.id: r.meta for r in raw_records if r.meta}
    if metas:
        (d / "meta.json").write_text(json.dumps(metas))


# ---------------------------------------------------------------------------
# splitting and prevalence

@dataclass
class SplitPlan:
    test_fraction: float = 0.15
    n_folds: int = 5
    seed: int = 0


@dataclass
class Splits:
    test: list
    folds: list  # [(train_indices, val_indices)]

    @property
    def pool(self) -> list:
        return sorted(i for _, val in self.folds for i in val)


def _stratified_order(labels: np.ndarray, idx: np.ndarray, n_folds: int, rng: nx.Rng) -> list[int]:
    keys = ["".join(str(int(v)) for v in labels[i]) for i in idx]
    groups: dict[str, list[int]] = {}
    for i, k in zip(idx, keys):
        groups.setdefault(k, []).append(int(i))
    common = {k: v for k, v in groups.items() if len(v) >= n_folds}
    rare = [i for k, v in groups.items() if len(v) < n_folds for i in v]
    order = []
    for k in sorted(common):
        members = common[k]
        order.extend(members[j] for j in rng.permutation(len(members)))
    order.extend(rare[j] for j in rng.permutation(len(rare)))
    return order


def make_splits(labels, plan: SplitPlan) -> Splits:
    """Held-out test set plus ``n_folds`` train/val folds over the remainder.

    Records are grouped by exact multi-hot pattern (patterns rarer than
    ``n_folds`` are pooled) and assigned systematically so every split sees
    each common pattern in proportion.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 10 * plan.n_folds:
        raise ConfigurationError(f"need at least {10 * plan.n_folds} records for {plan.n_folds} folds, got {n}")
    if not 0.0 <= plan.test_fraction < 1.0:
        raise ConfigurationError("test_fraction must be in [0, 1)")
    rng = nx.Rng(plan.seed)
    order = _stratified_order(labels, np.arange(n), plan.n_folds, rng)
    n_test = int(round(n * plan.test_fraction))
    test = [order[i] for i in range(n) if (i + 1) * n_test // n > i * n_test // n]
    test_set = set(test)
    pool = np.array([i for i in range(n) if i not in test_set])
    pool_order = _stratified_order(labels, pool, plan.n_folds, rng)
    vals = [sorted(pool_order[j::plan.n_folds]) for j in range(plan.n_folds)]
    folds = []
    for j in range(plan.n_folds):
        val = set(vals[j])
        folds.append(([int(i) for i in pool if i not in val], vals[j]))
    return Splits(sorted(test), folds)


def class_prevalence(labels) -> np.ndarray:
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], EcgRecord):
        labels = label_matrix(labels)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise InputError("cannot compute prevalence of an empty set")
    return labels.mean(axis=0)
