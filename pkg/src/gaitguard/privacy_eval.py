"""Privacy-utility evaluation: feature-histogram divergence, accuracy
reduction, and the full sweep over masking approaches x noise
distributions x lambda.

Each sweep cell mitigates the rendered corpus, re-extracts keypoints and
gait features, and measures (a) the Jensen-Shannon divergence between the
original and post-mitigation feature histograms, averaged over features
then subjects, (b) classifier accuracy on the post-mitigation features
under the identical training protocol, and (c) residual frame clarity as
mean SNR. A flagged baseline row carries the unmitigated reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .gait_extract import FEATURE_NAMES, GaitFeatureRow, extract_features
from .identity import Hyperparams, dataset_from_rows, evaluate_cv
from .keypoint_io import MarkerCalibration
from .mitigate import (
    LAMBDA_GRID,
    Approach,
    Distribution,
    NoiseConfig,
    mitigate_frame,
    snr_db,
)
from .synthlab import (
    MarkerStyle,
    WalkerSpec,
    extract_sequence,
    fit_start_x,
    generate_walker,
    render_frames,
)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in base 2 (range [0, 1], 0*log0 = 0).

    Computed elementwise and summed once, so jsd(p, q) == jsd(q, p)
    exactly.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValidationError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValidationError("distributions must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValidationError(
            f"distributions must sum to 1 (got {p.sum():.12f}, {q.sum():.12f})")
    m = 0.5 * (p + q)
    terms = np.zeros_like(p)
    pk = p > 0
    qk = q > 0
    terms[pk] += 0.5 * p[pk] * np.log2(p[pk] / m[pk])
    terms[qk] += 0.5 * q[qk] * np.log2(q[qk] / m[qk])
    return float(min(max(terms.sum(), 0.0), 1.0))


@dataclass(frozen=True)
class FeatureHistogramPair:
    """Aligned normalized histograms of one feature before (p) and after
    (q) mitigation."""

    feature_name: str
    bin_edges: np.ndarray
    p: np.ndarray
    q: np.ndarray


def histogram_pair(values_g, values_gprime, bins: int = 10,
                   feature_name: str = "") -> FeatureHistogramPair:
    """Equal-width histograms over the union range of both samples; a zero
    range degenerates to a single shared bin."""
    g = np.asarray(values_g, dtype=np.float64)
    gp = np.asarray(values_gprime, dtype=np.float64)
    if g.size == 0 or gp.size == 0:
        raise InsufficientDataError(
            f"feature {feature_name or '?'}: empty value list")
    lo = float(min(g.min(), gp.min()))
    hi = float(max(g.max(), gp.max()))
    if lo == hi:
        return FeatureHistogramPair(feature_name, np.array([lo, hi]),
                                    np.array([1.0]), np.array([1.0]))
    edges = np.linspace(lo, hi, bins + 1)
    p, _ = np.histogram(g, bins=edges)
    q, _ = np.histogram(gp, bins=edges)
    return FeatureHistogramPair(feature_name, edges,
                                p / p.sum(), q / q.sum())


@dataclass
class PutCell:
    """One cell of the privacy-utility sweep (or the baseline row)."""

    approach: str
    distribution: str
    lam: float | None
    mean_jsd: float
    accuracy: float
    accuracy_reduction: float
    mean_snr_db: float
    n_rows_g: int
    n_rows_gprime: int
    flags: str = ""


@dataclass
class SweepGrid:
    approaches: tuple[Approach, ...] = (Approach.KPM, Approach.LBM)
    distributions: tuple[Distribution, ...] = tuple(Distribution)
    lambdas: tuple[float, ...] = LAMBDA_GRID

    def cells(self):
        for a in self.approaches:
            for d in self.distributions:
                for lam in self.lambdas:
                    yield a, d, lam

    def __len__(self):
        return len(self.approaches) * len(self.distributions) * len(self.lambdas)


@dataclass
class SweepParams:
    duration_s: float = 5.0
    fps: float = 15.0
    canvas: tuple[int, int] = (320, 240)
    clips_per_subject: int = 2
    bins: int = 10
    folds: int = 3
    repeats: int = 2
    seed: int = 0
    kpm_patch_px: int = 48
    calibration: MarkerCalibration | None = None
    style: MarkerStyle = field(default_factory=MarkerStyle)
    hyper: Hyperparams = field(default_factory=Hyperparams)


def _rows_by_subject(rows: list[GaitFeatureRow]) -> dict[str, list[GaitFeatureRow]]:
    by_subject: dict[str, list[GaitFeatureRow]] = {}
    for row in rows:
        by_subject.setdefault(row.subject_id, []).append(row)
    return by_subject


def _feature_values(rows, name):
    return [getattr(r, name) for r in rows if getattr(r, name) is not None]


def mean_feature_jsd(rows_g: list[GaitFeatureRow], rows_gprime: list[GaitFeatureRow],
                     bins: int = 10) -> float:
    """JSD averaged over features then over the subjects present in the
    original corpus; a feature (or subject) wiped out by mitigation scores
    the maximal divergence of 1."""
    by_g = _rows_by_subject(rows_g)
    by_gp = _rows_by_subject(rows_gprime)
    subject_scores = []
    for subject, g_rows in sorted(by_g.items()):
        gp_rows = by_gp.get(subject, [])
        feature_scores = []
        for name in FEATURE_NAMES:
            g_vals = _feature_values(g_rows, name)
            gp_vals = _feature_values(gp_rows, name)
            if not g_vals and not gp_vals:
                continue
            if not g_vals or not gp_vals:
                feature_scores.append(1.0)
                continue
            pair = histogram_pair(g_vals, gp_vals, bins, name)
            feature_scores.append(jsd(pair.p, pair.q))
        if feature_scores:
            subject_scores.append(float(np.mean(feature_scores)))
        else:
            subject_scores.append(1.0)
    if not subject_scores:
        raise InsufficientDataError("no subjects with any feature values")
    return float(np.mean(subject_scores))


# --- the sweep -----------------------------------------------------------------

def _cell_seed(base_seed: int, cell_index: int) -> int:
    return (base_seed * 1_000_003 + 7919 * (cell_index + 1)) & 0x7FFFFFFF


@dataclass
class _RenderedClip:
    subject_id: str
    sequence_id: str
    spec: WalkerSpec
    frames: list
    records: dict[int, object]
    fps: float


def _render_corpus(specs, params: SweepParams):
    clips = []
    for si, spec in enumerate(specs):
        for ci in range(params.clips_per_subject):
            seq_seed = params.seed * 100_003 + si * 101 + ci
            seq, _ = generate_walker(
                spec, params.duration_s, params.fps, seed=seq_seed,
                start_x=fit_start_x(spec, params.duration_s, params.canvas[0],
                                    params.style.radius),
                sequence_id=f"{spec.subject_id}-c{ci}",
            )
            frames, records = render_frames(seq, params.canvas, params.style)
            # Distinct frame ids per clip decorrelate the per-frame noise
            # streams across the corpus.
            offset = (si * params.clips_per_subject + ci) * 1_000_000
            for fr in frames:
                fr.frame_id += offset
            rec_map = {}
            for rec in records:
                rec.frame_id += offset
                rec_map[rec.frame_id] = rec
            clips.append(_RenderedClip(spec.subject_id, seq.sequence_id, spec,
                                       frames, rec_map, params.fps))
    return clips


def _extract_rows(clips, params: SweepParams,
                  mitigated_by_clip=None) -> list[GaitFeatureRow]:
    rows = []
    for i, clip in enumerate(clips):
        frames = mitigated_by_clip[i] if mitigated_by_clip is not None else clip.frames
        seq = extract_sequence(frames, clip.fps, clip.subject_id, clip.sequence_id,
                               params.style, spec=clip.spec, regions=clip.records)
        try:
            report = extract_features(seq, cal=params.calibration)
        except ValidationError:
            continue
        if not report.rejected:
            rows.extend(report.rows)
    return rows


def _cell_accuracy(rows, params: SweepParams, baseline_classes: list[str]):
    """Accuracy (mean weighted F1) under the baseline protocol; classes too
    thin to stratify are dropped, and an unusable cell scores chance."""
    chance = 1.0 / len(baseline_classes)
    usable = [r for r in rows]
    by_subject = _rows_by_subject(usable)
    kept = {s for s, rs in by_subject.items() if len(rs) >= params.folds}
    usable = [r for r in usable if r.subject_id in kept]
    flags = []
    if len(kept) < 2:
        return chance, ["chance-placeholder"]
    if len(kept) < len(baseline_classes):
        flags.append("classes-dropped")
    data = dataset_from_rows(usable, include_step_length=params.calibration is not None)
    report = evaluate_cv(data, params.hyper, params.folds, params.repeats, params.seed)
    return report.weighted_f1_mean, flags


def run_put_sweep(specs: list[WalkerSpec], grid: SweepGrid | None = None,
                  params: SweepParams | None = None) -> list[PutCell]:
    """Run the full privacy-utility sweep on a synthetic corpus.

    Returns the flagged baseline row followed by one cell per grid entry,
    sorted by (approach, distribution, lambda).
    """
    grid = grid or SweepGrid()
    params = params or SweepParams()
    if len({s.subject_id for s in specs}) < 2:
        raise ValidationError("sweep corpus needs >=2 distinct subjects")

    clips = _render_corpus(specs, params)
    rows_g = _extract_rows(clips, params)
    if not rows_g:
        raise InsufficientDataError("baseline extraction produced no feature rows")
    baseline_data = dataset_from_rows(
        rows_g, include_step_length=params.calibration is not None)
    baseline_classes = baseline_data.classes
    if len(baseline_classes) < 2:
        raise InsufficientDataError("baseline corpus has fewer than 2 classes")
    baseline_report = evaluate_cv(baseline_data, params.hyper, params.folds,
                                  params.repeats, params.seed)
    baseline_acc = baseline_report.weighted_f1_mean

    cells = [PutCell(
        approach="baseline",
        distribution="",
        lam=None,
        mean_jsd=mean_feature_jsd(rows_g, rows_g, params.bins),
        accuracy=baseline_acc,
        accuracy_reduction=0.0,
        mean_snr_db=math.inf,
        n_rows_g=len(rows_g),
        n_rows_gprime=len(rows_g),
        flags="baseline",
    )]

    for cell_index, (approach, dist, lam) in enumerate(sorted(
            grid.cells(), key=lambda c: (c[0].value, c[1].value, c[2]))):
        cfg = NoiseConfig(approach, dist, lam, params.kpm_patch_px,
                          seed=_cell_seed(params.seed, cell_index))
        snrs = []
        mitigated_by_clip = []
        for clip in clips:
            mitigated = []
            for frame in clip.frames:
                rec = clip.records.get(frame.frame_id)
                box = rec.boxes[0] if rec and rec.boxes else None
                kps = rec.keypoints if rec else None
                out = mitigate_frame(frame, cfg, region=box, keypoints=kps)
                mitigated.append(out)
                if box is not None:
                    snrs.append(snr_db(frame, out, box))
            mitigated_by_clip.append(mitigated)
        rows_gp = _extract_rows(clips, params, mitigated_by_clip)
        accuracy, flags = _cell_accuracy(rows_gp, params, baseline_classes)
        if not rows_gp:
            flags = ["empty-gprime"] + flags
        cells.append(PutCell(
            approach=approach.value,
            distribution=dist.value,
            lam=lam,
            mean_jsd=mean_feature_jsd(rows_g, rows_gp, params.bins),
            accuracy=accuracy,
            accuracy_reduction=baseline_acc - accuracy,
            mean_snr_db=float(np.mean(snrs)) if snrs else math.inf,
            n_rows_g=len(rows_g),
            n_rows_gprime=len(rows_gp),
            flags=";".join(flags),
        ))
    return cells


# --- output --------------------------------------------------------------------

CSV_COLUMNS = ("approach", "distribution", "lambda", "mean_jsd", "accuracy",
               "accuracy_reduction", "mean_snr_db", "flags")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def write_sweep_csv(cells: list[PutCell], path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for c in cells:
        lines.append(",".join([
            c.approach, c.distribution, _fmt(c.lam), _fmt(c.mean_jsd),
            _fmt(c.accuracy), _fmt(c.accuracy_reduction), _fmt(c.mean_snr_db),
            c.flags,
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def sweep_to_dicts(cells: list[PutCell]) -> list[dict]:
    out = []
    for c in cells:
        out.append({
            "approach": c.approach,
            "distribution": c.distribution,
            "lambda": c.lam,
            "mean_jsd": c.mean_jsd,
            "accuracy": c.accuracy,
            "accuracy_reduction": c.accuracy_reduction,
            "mean_snr_db": None if math.isinf(c.mean_snr_db) else c.mean_snr_db,
            "n_rows_g": c.n_rows_g,
            "n_rows_gprime": c.n_rows_gprime,
            "flags": c.flags,
        })
    return out


def plot_sweep_svg(cells: list[PutCell], path) -> None:
    """Static SVG of the privacy-utility curves (JSD, accuracy and SNR as
    a function of lambda, one line per approach/distribution)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gaitguard"
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    grid_cells = [c for c in cells if c.approach != "baseline"]
    keys = sorted({(c.approach, c.distribution) for c in grid_cells})
    for approach, dist in keys:
        series = sorted((c for c in grid_cells
                         if c.approach == approach and c.distribution == dist),
                        key=lambda c: c.lam)
        lams = [c.lam for c in series]
        label = f"{approach}/{dist}"
        axes[0].plot(lams, [c.mean_jsd for c in series], marker="o", label=label)
        axes[1].plot(lams, [c.accuracy for c in series], marker="o", label=label)
        finite = [(c.lam, c.mean_snr_db) for c in series if math.isfinite(c.mean_snr_db)]
        if finite:
            axes[2].plot(*zip(*finite), marker="o", label=label)
    baseline = next((c for c in cells if c.approach == "baseline"), None)
    if baseline is not None:
        axes[1].axhline(baseline.accuracy, linestyle="--", color="gray",
                        label="baseline")
    for ax, title in zip(axes, ("mean JSD", "accuracy", "mean SNR (dB)")):
        ax.set_xlabel("lambda")
        ax.set_title(title)
    axes[0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
