"""Command-line pipeline: synth, preprocess, train, evaluate, ablate, explain, gradcheck, selftest.

Exit codes: 0 success, 1 runtime/input failure, 2 usage, 3 invalid config,
4 numeric-health abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import numerics as nx
from .config import PROFILES, ModelConfig, profile
from .data import (SplitPlan, class_prevalence, label_matrix, load_dataset, load_processed, make_splits,
                   preprocess_records, save_processed, synth_corpus, synth_dataset, write_raw_corpus)
from .errors import ConfigurationError, CpfError, InputError, NumericHealthError
from .loss import LossConfig, class_weights_from_prevalence
from .train import TrainConfig, cross_validate, load_checkpoint, save_checkpoint, train_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("cpformer")

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss", "seed"}
_LOSS_KEYS = {"alpha", "gamma", "class_weights", "cooccur_weight", "diversity_weight", "uncertainty_weight"}
_RUN_KEYS = {"profile", "seed", "out", "data", "raw_dir", "labels", "synth_n", "synth_seed", "synth_length",
             "test_fraction", "n_folds", "split_seed", "target_hz", "length"}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out: str = "runs/default"
    data: str | None = None  # processed dataset directory; None -> in-process synthetic corpus
    raw_dir: str | None = None
    labels: str | None = None
    synth_n: int = 400
    synth_seed: int = 1
    synth_length: int = 256
    target_hz: float = 100.0
    length: int | None = None
    split: SplitPlan = field(default_factory=SplitPlan)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        self.model.validate()
        for key in ("data", "raw_dir", "labels"):
            path = getattr(self, key)
            if path is not None and not Path(path).exists():
                raise ConfigurationError(f"{key}={path} does not exist")
        if self.split.n_folds < 2:
            raise ConfigurationError("n_folds must be >= 2")

    def to_dict(self) -> dict:
        return {"profile": self.profile, "seed": self.seed, "out": self.out, "data": self.data,
                "synth_n": self.synth_n, "synth_seed": self.synth_seed,
                "split": dataclasses.asdict(self.split), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "loss_overrides": self.loss_overrides}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got '{raw.strip()}'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {n}: empty key")
        out[key] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return None if value.lower() in ("none", "") else float(value)
    if isinstance(like, tuple):
        return tuple(float(v) if "." in v else int(v) for v in value.replace(",", " ").split())
    return value


def build_run_config(values: dict[str, str], profile_override: str | None = None,
                     seed_override: int | None = None, out_override: str | None = None) -> RunConfig:
    values = dict(values)
    prof = profile_override or values.pop("profile", "desk")
    values.pop("profile", None)
    if prof not in PROFILES:
        raise ConfigurationError(f"unknown profile '{prof}' (known: {', '.join(PROFILES)})")
    unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS - _LOSS_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        base_model = profile(prof)
        model_kw = {k: _coerce(v, getattr(base_model, k)) for k, v in values.items() if k in _MODEL_KEYS}
        model = profile(prof, **model_kw)
        base_train = train_config(prof)
        train_kw = {k: _coerce(v, getattr(base_train, k)) for k, v in values.items() if k in _TRAIN_KEYS}
        seed = int(values.get("seed", 0)) if seed_override is None else seed_override
        train = train_config(prof, seed=seed, **train_kw)
        loss = {}
        for k in _LOSS_KEYS & set(values):
            loss[k] = [float(v) for v in values[k].replace(",", " ").split()] if k == "class_weights" \
                else float(values[k])
        split = SplitPlan(float(values.get("test_fraction", 0.15)), int(values.get("n_folds", 5)),
                          int(values.get("split_seed", seed)))
        cfg = RunConfig(
            profile=prof, seed=seed, out=out_override or values.get("out", f"runs/{prof}"),
            data=values.get("data"), raw_dir=values.get("raw_dir"), labels=values.get("labels"),
            synth_n=int(values.get("synth_n", 400)), synth_seed=int(values.get("synth_seed", 1)),
            synth_length=int(values.get("synth_length", model.signal_length)),
            target_hz=float(values.get("target_hz", 100.0)),
            length=int(values["length"]) if "length" in values else None,
            split=split, model=model, train=train, loss_overrides=loss)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from None
    cfg.validate()
    return cfg


def load_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        values = parse_config_text(path.read_text())
    return build_run_config(values, getattr(args, "profile", None), getattr(args, "seed", None),
                            getattr(args, "out", None))


def _loss_config(cfg: RunConfig, train_labels) -> LossConfig | None:
    if not cfg.loss_overrides:
        return None
    kw = dict(cfg.loss_overrides)
    if "class_weights" not in kw:
        kw["class_weights"] = class_weights_from_prevalence(class_prevalence(train_labels))
    return LossConfig(**kw)


def _load_records(cfg: RunConfig, data: str | None = None):
    path = data or cfg.data
    if path:
        return load_processed(path)
    log.info("no data path; generating %d synthetic records (seed %d)", cfg.synth_n, cfg.synth_seed)
    return synth_dataset(cfg.synth_n, cfg.synth_seed, cfg.synth_length)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = Path(args.out or "synth")
    if args.processed:
        recs = synth_dataset(args.n, args.seed if args.seed is not None else 1, args.length)
        save_processed(out, recs)
    else:
        raw = synth_corpus(args.n, args.seed if args.seed is not None else 1, args.length / 100.0)
        write_raw_corpus(out, raw)
    print(f"wrote {args.n} synthetic records to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args)
    raw_dir = args.input or cfg.raw_dir
    labels = args.labels or cfg.labels or (raw_dir and str(Path(raw_dir) / "labels.csv"))
    if not raw_dir:
        raise ConfigurationError("preprocess needs --input DIR (or raw_dir in the config)")
    result = load_dataset(raw_dir, labels)
    if not result.records:
        first = "; ".join(f"{rid}: {why}" for rid, why in result.rejected[:3])
        raise InputError(f"no usable records in {raw_dir} ({len(result.rejected)} rejected: {first})")
    recs = preprocess_records(result.records, cfg.target_hz, cfg.length)
    out = Path(args.out) if args.out else Path(cfg.out) / "processed"
    save_processed(out, recs)
    print(result.report())
    print(f"wrote {len(recs)} processed records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.out)
    records = _load_records(cfg)
    labels = label_matrix(records)
    splits = make_splits(labels, cfg.split)
    pool_labels = labels[splits.pool]
    tcfg = dataclasses.replace(cfg.train, loss=_loss_config(cfg, pool_labels))
    _write_json(out / "run_config.json", cfg.to_dict())
    _write_json(out / "splits.json", {"test": [records[i].id for i in splits.test],
                                      "folds": [[records[i].id for i in va] for _, va in splits.folds]})
    t0 = time.perf_counter()
    cv = cross_validate(records, splits, cfg.model, tcfg, out_dir=out, verbose=True)
    print(json.dumps(cv.summary, indent=2))
    if splits.test:
        from .evaluation import evaluate
        test = [records[i] for i in splits.test]
        save_processed(out / "test_set", test)
        report, _ = evaluate(cv.best.checkpoint, test)
        report.to_json(out / "test_metrics.json")
        print(f"test macro F1 {report.macro_f1:.4f}  macro AUC {report.macro_auc}")
    print(f"trained {len(cv.folds)} folds in {time.perf_counter() - t0:.1f}s; best checkpoint {out / 'best'}")
    return EXIT_OK


def _checkpoint_and_data(args):
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    data = args.data
    if data is None:
        guess = Path(args.checkpoint).parent / "test_set"
        if not guess.exists():
            raise ConfigurationError("--data is required (no test_set next to the checkpoint)")
        data = str(guess)
    return ckpt, load_processed(data)


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate
    ckpt, records = _checkpoint_and_data(args)
    report, probs = evaluate(ckpt, records)
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    nx.save_array(out / "probs.bin", probs, "probs")
    print(f"macro F1 {report.macro_f1:.4f}  hamming {report.hamming_accuracy:.4f}  -> {out / 'metrics.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import ablate_leads, write_ablation_csv
    ckpt, records = _checkpoint_and_data(args)
    rows = ablate_leads(ckpt, records)
    out = Path(args.out or Path(args.checkpoint).parent / "ablation.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "ablation.csv"
    write_ablation_csv(out, rows)
    for r in rows:
        print(f"{r.subset:>11s}  macro F1 {r.report.macro_f1:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .evaluation import export_explanations
    ckpt, records = _checkpoint_and_data(args)
    if args.ids:
        wanted = set(args.ids.split(","))
        records = [r for r in records if r.id in wanted]
    records = records[: args.limit] if args.limit else records
    out = Path(args.out or Path(args.checkpoint).parent / "expl")
    export_explanations(ckpt, records, out, with_attention=args.attention, svg=args.svg)
    print(f"wrote {len(records)} explanation bundles to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selftest import gradient_suite
    results = gradient_suite(include_model=not args.skip_model)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    t0 = time.perf_counter()
    ok = run_selftest(include_model_gradcheck=not args.skip_model)
    print(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--profile", choices=sorted(PROFILES))
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint directory")
            sp.add_argument("--data", help="processed dataset directory")
        return sp

    s = common(sub.add_parser("synth", help="generate a labeled synthetic corpus"))
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--length", type=int, default=256, help="samples at 100 Hz")
    s.add_argument("--processed", action="store_true", help="write preprocessed tensors instead of raw CSV")
    s.set_defaults(fn=cmd_synth)

    s = common(sub.add_parser("preprocess", help="raw CSV -> processed tensors"))
    s.add_argument("--input", help="directory of per-record CSV files")
    s.add_argument("--labels", help="labels CSV (id,codes)")
    s.set_defaults(fn=cmd_preprocess)

    common(sub.add_parser("train", help="cross-validated training")).set_defaults(fn=cmd_train)
    common(sub.add_parser("evaluate", help="metrics JSON for a checkpoint"), True).set_defaults(fn=cmd_evaluate)
    common(sub.add_parser("ablate", help="lead-subset ablation table"), True).set_defaults(fn=cmd_ablate)

    s = common(sub.add_parser("explain", help="export explanation bundles"), True)
    s.add_argument("--ids", help="comma-separated record ids")
    s.add_argument("--limit", type=int)
    s.add_argument("--svg", action="store_true")
    s.add_argument("--attention", action="store_true", help="also dump per-layer attention tensors")
    s.set_defaults(fn=cmd_explain)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--skip-model", action="store_true")
    s.set_defaults(fn=cmd_gradcheck)
    s = sub.add_parser("selftest", help="invariant battery plus gradient suite")
    s.add_argument("--skip-model", action="store_true")
    s.set_defaults(fn=cmd_selftest)
    return p


def _diagnostic(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        _diagnostic("config", exc)
        return EXIT_CONFIG
    except NumericHealthError as exc:
        _diagnostic("numeric_health", exc)
        if exc.checkpoint is not None and getattr(args, "out", None):
            dest = save_checkpoint(exc.checkpoint, Path(args.out) / "last_good")
            print(f"last good checkpoint written to {dest}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CpfError, OSError) as exc:
        _diagnostic("runtime", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
