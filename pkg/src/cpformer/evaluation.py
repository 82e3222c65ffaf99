"""Checkpoint evaluation, lead ablation and explanation bundles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import CLASS_NAMES, LEAD_NAMES
from .data import label_matrix, signal_matrix
from .errors import ContractError, InputError
from .metrics import MetricsReport, compute_metrics
from .model import CardioPatternFormer, predict_probs
from .preprocess import LeadMask, apply_lead_mask

LIMB_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF")
PRECORDIAL_LEADS = ("V1", "V2", "V3", "V4", "V5", "V6")
REDUCED_LEADS = ("I", "II", "V1", "V5")


def _num(v) -> str:
    """Round-trippable text for a float, numpy scalar or not."""
    return repr(float(v))


def _model_and_thresholds(source, thresholds=None):
    """Accept a trained model or a Checkpoint; checkpoint thresholds win when none are given."""
    if isinstance(source, CardioPatternFormer):
        th = np.full(source.cfg.n_classes, 0.5) if thresholds is None else thresholds
        return source, np.asarray(th, dtype=np.float64)
    model = source.build_model()
    th = source.thresholds if thresholds is None else thresholds
    return model, np.asarray(th, dtype=np.float64)


def evaluate(source, records, thresholds=None, batch_size: int = 32) -> tuple[MetricsReport, np.ndarray]:
    """Metrics on ``records``; returns the report and the probability matrix."""
    if not records:
        raise InputError("no records to evaluate")
    model, th = _model_and_thresholds(source, thresholds)
    probs = predict_probs(model, signal_matrix(records), batch_size)
    return compute_metrics(probs, label_matrix(records), th), probs


# ---------------------------------------------------------------------------
# lead ablation

@dataclass
class AblationConfig:
    subsets: list = field(default_factory=list)  # [(name, tuple of lead names)]

    def __post_init__(self):
        for name, leads in self.subsets:
            if not leads:
                raise InputError(f"ablation subset '{name}' is empty")
            LeadMask.from_names(leads)

    @classmethod
    def default(cls) -> "AblationConfig":
        subsets = [(lead, (lead,)) for lead in LEAD_NAMES]
        subsets += [("limb", LIMB_LEADS), ("precordial", PRECORDIAL_LEADS),
                    ("reduced", REDUCED_LEADS), ("full", LEAD_NAMES)]
        return cls(subsets)


@dataclass
class AblationRow:
    subset: str
    leads: tuple
    report: MetricsReport


def ablate_leads(source, records, config: AblationConfig | None = None, thresholds=None,
                 batch_size: int = 32) -> list[AblationRow]:
    """Zero every lead outside each subset, then evaluate with the stored thresholds."""
    config = config or AblationConfig.default()
    model, th = _model_and_thresholds(source, thresholds)
    x = signal_matrix(records)
    y = label_matrix(records)
    rows = []
    for name, leads in config.subsets:
        masked = apply_lead_mask(x, LeadMask.from_names(leads))
        rows.append(AblationRow(name, tuple(leads), compute_metrics(predict_probs(model, masked, batch_size), y, th)))
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "leads", "macro_f1", "macro_auc", "macro_precision", "macro_recall",
                    "hamming_accuracy", *[f"f1_{c}" for c in CLASS_NAMES]])
        for r in rows:
            rep = r.report
            w.writerow([r.subset, " ".join(r.leads), _num(rep.macro_f1),
                        "" if rep.macro_auc is None else _num(rep.macro_auc),
                        _num(rep.macro_precision), _num(rep.macro_recall), _num(rep.hamming_accuracy),
                        *[_num(v) for v in rep.f1]])


# ---------------------------------------------------------------------------
# explanations

@dataclass
class ExplanationBundle:
    record_id: str
    maps: np.ndarray  # [C, T], rows are distributions
    relevance: np.ndarray  # [T]
    uncertainty: np.ndarray  # [C]
    probs: np.ndarray  # [C]
    thresholds: np.ndarray  # [C]
    token_times: np.ndarray  # [T, 2] start/end seconds
    average_attention: np.ndarray  # [T] attention received per key token
    attention: list | None = None  # per layer [H, T, T]

    def check(self, tol: float = 1e-9) -> None:
        err = np.abs(self.maps.sum(axis=-1) - 1.0).max()
        if err > tol:
            raise ContractError(f"{self.record_id}: explanation maps off the simplex by {err:.2e}")
        if np.any(np.diff(self.token_times[:, 0]) <= 0):
            raise ContractError(f"{self.record_id}: token time mapping not increasing")


def average_attention(weights) -> np.ndarray:
    """Mean over layers, heads and queries of the attention each key receives."""
    return np.mean([w.mean(axis=(0, 1)) for w in weights], axis=0)


def explain_records(source, records, thresholds=None, with_attention: bool = False,
                    batch_size: int = 16) -> list[ExplanationBundle]:
    model, th = _model_and_thresholds(source, thresholds)
    was_training = model.training
    model.eval()
    out = []
    try:
        for s in range(0, len(records), batch_size):
            chunk = records[s:s + batch_size]
            with nx.no_grad():
                res = model(signal_matrix(chunk), return_weights=True)
            probs = res.probabilities()
            t = res.explanation_maps.shape[-1]
            times = model.tokenizer.token_times(t)
            for i, rec in enumerate(chunk):
                weights = [w.data[i] for w in res.attention]
                b = ExplanationBundle(rec.id, res.explanation_maps.data[i], res.relevance.data[i],
                                      res.uncertainty.data[i], probs[i], th, times,
                                      average_attention(weights), weights if with_attention else None)
                b.check()
                out.append(b)
    finally:
        model.train(was_training)
    return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_bundle(bundle: ExplanationBundle, directory, signal: np.ndarray | None = None,
                 svg: bool = False) -> Path:
    bundle.check()
    d = Path(directory) / bundle.record_id
    d.mkdir(parents=True, exist_ok=True)
    t = bundle.maps.shape[1]
    _write_rows(d / "maps.csv", ["class", *[f"t{k}" for k in range(t)]],
                [[c, *[_num(v) for v in row]] for c, row in zip(CLASS_NAMES, bundle.maps)])
    _write_rows(d / "relevance.csv", ["token", "start_s", "end_s", "relevance"],
                [[k, _num(a), _num(b), _num(r)] for k, ((a, b), r) in enumerate(zip(bundle.token_times, bundle.relevance))])
    _write_rows(d / "uncertainty.csv", ["class", "uncertainty"],
                [[c, _num(u)] for c, u in zip(CLASS_NAMES, bundle.uncertainty)])
    _write_rows(d / "probs.csv", ["class", "probability", "threshold", "predicted"],
                [[c, _num(p), _num(th), int(p >= th)] for c, p, th in zip(CLASS_NAMES, bundle.probs, bundle.thresholds)])
    _write_rows(d / "attention.csv", ["token", "start_s", "end_s", "attention_received"],
                [[k, _num(a), _num(b), _num(v)] for k, ((a, b), v) in enumerate(zip(bundle.token_times, bundle.average_attention))])
    if bundle.attention is not None:
        for layer, w in enumerate(bundle.attention):
            nx.save_array(d / f"attention_layer{layer}.bin", w, f"layer{layer}")
    if svg and signal is not None:
        (d / "overlay.svg").write_text(overlay_svg(signal, bundle))
    return d


def export_explanations(source, records, directory, thresholds=None, with_attention: bool = False,
                        svg: bool = False) -> list[ExplanationBundle]:
    """Write ``<directory>/<id>/`` bundles for each record."""
    bundles = explain_records(source, records, thresholds, with_attention)
    for rec, b in zip(records, bundles):
        write_bundle(b, directory, rec.signal, svg)
    return bundles


def overlay_svg(signal: np.ndarray, bundle: ExplanationBundle, sample_rate_hz: float = 100.0,
                width: int = 900) -> str:
    """ECG traces stacked per lead with one heat strip per class underneath."""
    n_leads, n = signal.shape
    duration = n / sample_rate_hz
    lead_h, strip_h, margin = 40, 14, 60
    height = n_leads * lead_h + len(CLASS_NAMES) * strip_h + 30
    sx = (width - margin - 10) / duration
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="10">',
             '<rect width="100%" height="100%" fill="white"/>']
    t = np.arange(n) / sample_rate_hz
    for i in range(n_leads):
        y0 = i * lead_h + lead_h / 2
        scale = lead_h / 2 / max(np.abs(signal[i]).max(), 1e-9)
        pts = " ".join(f"{margin + tx * sx:.1f},{y0 - v * scale:.1f}" for tx, v in zip(t, signal[i]))
        parts.append(f'<text x="4" y="{y0 + 3:.0f}">{LEAD_NAMES[i]}</text>')
        parts.append(f'<polyline fill="none" stroke="black" stroke-width="0.6" points="{pts}"/>')
    top = n_leads * lead_h + 20
    for c, row in enumerate(bundle.maps):
        y = top + c * strip_h
        peak = max(row.max(), 1e-12)
        parts.append(f'<text x="4" y="{y + 10}">{CLASS_NAMES[c][:9]}</text>')
        for (a, b), v in zip(bundle.token_times, row):
            parts.append(f'<rect x="{margin + a * sx:.1f}" y="{y}" width="{(b - a) * sx:.1f}" '
                         f'height="{strip_h - 2}" fill="red" fill-opacity="{v / peak:.3f}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
