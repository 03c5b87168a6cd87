"""End-to-end orchestration behind the CLI subcommands.

Output layout under ``cfg.out``::

    seed_<s>/models/<machine>_section_<NN>.model
    seed_<s>/models/<machine>_section_<NN>_loss.csv
    seed_<s>/scores/<backend>/anomaly_score_<machine>_section_<NN>.csv
    reports/<backend>/seed_<s>{.csv,_cells.csv,.txt}
    reports/<backend>/average{.csv,_cells.csv,.txt}
    reports/<backend>/decisions_seed_<s>.csv
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .dataset import (
    SynthSpec,
    load_ground_truth,
    read_wav,
    scan_dataset,
    synthesize_dataset,
)
from .dsp import extract_features, fit_normalizer
from .errors import FsasdError, InvalidInput, MissingModel, UnmatchedClip
from .io import atomic_write_text
from .model import load_model, save_model, train
from .scoring import (
    BACKENDS,
    fit_covariances,
    fit_threshold,
    read_scores,
    score_clip,
    write_scores,
)

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    outputs: list[Path] = field(default_factory=list)
    failures: dict = field(default_factory=dict)  # section label -> message

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def section_label(machine_type: str, section: int) -> str:
    return f"{machine_type}_section_{section:02d}"


def model_path(out, seed, machine_type, section) -> Path:
    return Path(out) / f"seed_{seed}" / "models" / f"{section_label(machine_type, section)}.model"


def score_path(out, seed, backend, machine_type, section) -> Path:
    return (Path(out) / f"seed_{seed}" / "scores" / backend
            / f"anomaly_score_{section_label(machine_type, section)}.csv")


def report_dir(out, backend) -> Path:
    return Path(out) / "reports" / backend


# ---------------------------------------------------------------- synth

def cmd_synth(spec: SynthSpec, out_dir, seed: int = 7, force: bool = False):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise InvalidInput(f"{out_dir} is not empty; pass --force to overwrite")
        if not (out_dir / "ground_truth.csv").exists():
            raise InvalidInput(f"{out_dir} does not look like a generated dataset; "
                               "refusing to clear it")
        shutil.rmtree(out_dir)
    manifest = synthesize_dataset(spec, out_dir, seed)
    return manifest


def manifest_summary(manifest) -> str:
    lines = []
    for (m, n, d, split, label), c in sorted(manifest.counts.items()):
        lines.append(f"{m:>12s}  section {n:02d}  {split:5s}  {d:7s}  {label:7s}  {c:5d}")
    return "\n".join(lines)


# ---------------------------------------------------------------- features

def clip_features(clip, cfg: RunConfig) -> np.ndarray:
    mel = cfg.mel_config()
    audio = read_wav(clip.path, expected_rate=mel.sample_rate)
    return extract_features(audio, cfg.stft_config(), mel, cfg.context).values


# ---------------------------------------------------------------- train

def _train_section(manifest, machine_type, section, cfg: RunConfig, result: RunResult):
    clips = manifest.select(machine_type, section, split="train")
    if not clips:
        raise InvalidInput(f"no training clips for {section_label(machine_type, section)}")
    feats = [clip_features(c, cfg) for c in clips]
    normalizer = fit_normalizer(feats)
    x = normalizer(np.concatenate(feats, axis=0))
    dims = (x.shape[1], 128, 128, 128, 8, 128, 128, 128, x.shape[1])
    by_domain = {d: [f for c, f in zip(clips, feats) if c.domain == d] for d in ("source", "target")}
    for seed in cfg.seeds:
        state, history = train(x, cfg.train_config(seed), dims=dims)
        state.normalizer = normalizer
        backends = ["mse"]
        if cfg.backend == "selective_mahalanobis":
            state.covariances = fit_covariances(state, by_domain["source"], by_domain["target"],
                                                cfg.shrinkage)
            backends.append("selective_mahalanobis")
        for backend in backends:
            train_scores = [score_clip(state, f, backend).score for f in feats]
            state.thresholds[backend] = fit_threshold(train_scores, cfg.threshold_percentile)
        path = model_path(cfg.out, seed, machine_type, section)
        save_model(state, path)
        loss_csv = path.with_name(path.stem + "_loss.csv")
        atomic_write_text(loss_csv, "epoch,loss\n" + "".join(
            f"{i + 1},{v!r}\n" for i, v in enumerate(history)))
        result.outputs += [path, loss_csv]
        log.info("trained %s seed %d: final loss %.5f", section_label(machine_type, section),
                 seed, history[-1])


def cmd_train(cfg: RunConfig) -> RunResult:
    """One model per (machine type, section) per seed, from that section's clips only."""
    manifest = scan_dataset(cfg.dataset)
    result = RunResult()
    for m in manifest.machine_types():
        for n in manifest.sections(m):
            try:
                _train_section(manifest, m, n, cfg, result)
            except FsasdError as exc:
                log.error("training %s failed: %s", section_label(m, n), exc)
                result.failures[section_label(m, n)] = str(exc)
    return result


# ---------------------------------------------------------------- test

def cmd_test(cfg: RunConfig, backend: str | None = None) -> RunResult:
    """Score every test clip blind: only audio features reach the scorer."""
    backend = backend or cfg.backend
    manifest = scan_dataset(cfg.dataset)
    result = RunResult()
    for m in manifest.machine_types():
        for n in manifest.sections(m):
            clips = manifest.select(m, n, split="test")
            if not clips:
                continue
            try:
                feats = [clip_features(c, cfg) for c in clips]
                for seed in cfg.seeds:
                    path = model_path(cfg.out, seed, m, n)
                    if not path.exists():
                        raise MissingModel(f"no model for {section_label(m, n)} seed {seed} "
                                           f"at {path}")
                    state = load_model(path)
                    scores = [score_clip(state, f, backend, clip_id=c.clip_id,
                                         path=manifest.relpath(c))
                              for c, f in zip(clips, feats)]
                    out = score_path(cfg.out, seed, backend, m, n)
                    write_scores(out, scores)
                    result.outputs.append(out)
            except FsasdError as exc:
                log.error("testing %s failed: %s", section_label(m, n), exc)
                result.failures[section_label(m, n)] = str(exc)
    return result


# ---------------------------------------------------------------- evaluate

def evaluate_scores(scores, truth, p=0.1):
    """Join scores with ground truth and compute the report plus decision stats."""
    missing = sorted(s.path for s in scores if s.path not in truth)
    if missing:
        raise UnmatchedClip(missing)
    labeled, records = [], []
    for s in scores:
        t = truth[s.path]
        labeled.append(metrics.LabeledScore(s.score, t["label"], t["domain"], int(t["section"]),
                                            t["machine_type"]))
        if s.decision is not None:
            records.append((t["machine_type"], int(t["section"]), s.decision, t["label"]))
    return metrics.total_score(labeled, p=p), metrics.decision_stats(records)


def _decisions_csv(stats) -> str:
    def f(v):
        return "undefined" if v is None else repr(float(v))

    lines = ["machine_type,section,tp,fp,fn,tn,precision,recall,f1"]
    for (m, n), s in sorted(stats.items()):
        lines.append(f"{m},{n},{s['tp']},{s['fp']},{s['fn']},{s['tn']},"
                     f"{f(s['precision'])},{f(s['recall'])},{f(s['f1'])}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig, ground_truth=None, backend: str | None = None):
    """Per-seed reports plus the seed-averaged one. Returns ``(reports, RunResult)``."""
    backend = backend or cfg.backend
    if ground_truth is None:
        if cfg.dataset is None:
            raise InvalidInput("need --ground-truth or --dataset to locate ground_truth.csv")
        ground_truth = Path(cfg.dataset) / "ground_truth.csv"
    truth = load_ground_truth(ground_truth)
    result = RunResult()
    reports = {}
    out_dir = report_dir(cfg.out, backend)
    for seed in cfg.seeds:
        files = sorted((Path(cfg.out) / f"seed_{seed}" / "scores" / backend).glob("*.csv"))
        if not files:
            raise InvalidInput(f"no {backend} score files for seed {seed} under {cfg.out}")
        scores = [s for f in files for s in read_scores(f)]
        report, stats = evaluate_scores(scores, truth, cfg.p)
        report.seed, report.backend, report.config_digest = str(seed), backend, cfg.digest()
        metrics.write_report(report, out_dir / f"seed_{seed}")
        atomic_write_text(out_dir / f"decisions_seed_{seed}.csv", _decisions_csv(stats))
        reports[str(seed)] = report
        result.outputs += [out_dir / f"seed_{seed}.csv", out_dir / f"decisions_seed_{seed}.csv"]
    avg = metrics.average_reports(reports.values())
    metrics.write_report(avg, out_dir / "average")
    reports["average"] = avg
    result.outputs.append(out_dir / "average.csv")
    return reports, result


def cmd_report(cfg: RunConfig, backends=None) -> str:
    """Concatenate the rendered text tables already written by ``evaluate``."""
    chunks = []
    for backend in backends or BACKENDS:
        d = report_dir(cfg.out, backend)
        if not d.is_dir():
            continue
        names = [f"seed_{s}.txt" for s in cfg.seeds] + ["average.txt"]
        for name in names:
            if (d / name).exists():
                chunks.append((d / name).read_text())
    if not chunks:
        raise InvalidInput(f"no reports under {Path(cfg.out) / 'reports'}; run evaluate first")
    return "\n".join(chunks)
