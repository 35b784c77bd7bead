"""Out-of-distribution scoring from per-level NLLs, threshold selection and fine-tuning."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import metrics
from .cwfa import CWFA, TrainReport, build_conditions, train
from .optics import LensletLayout, PSFStack, richardson_lucy
from .validation import check_image, check_pairs, check_volume

log = logging.getLogger(__name__)

IN, OUT, UNKNOWN = "in", "out", "unknown"


@dataclass
class OODScore:
    per_level_nll: list  # per-dimension NLL, CWF steps 1..n then the LR term
    sample_id: str | int = 0
    label: str = UNKNOWN
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.per_level_nll = [float(v) for v in self.per_level_nll]
        if not all(math.isfinite(v) for v in self.per_level_nll):
            raise ValueError(f"sample {self.sample_id}: non-finite NLL {self.per_level_nll}")
        if self.label not in (IN, OUT, UNKNOWN):
            raise ValueError(f"label must be 'in', 'out' or 'unknown', got {self.label!r}")

    def level(self, level: int) -> float:
        """NLL of CWF step ``level`` (1 = highest resolution; n + 1 = the LR term)."""
        if not 1 <= level <= len(self.per_level_nll):
            raise ValueError(f"level must be in 1..{len(self.per_level_nll)}, got {level}")
        return self.per_level_nll[level - 1]


@dataclass
class ThresholdReport:
    level: int
    threshold: float
    f1: float
    auc: float
    roc: list  # [(fpr, tpr), ...] from (0, 0) to (1, 1)

    def to_dict(self):
        return {"level": self.level, "threshold": self.threshold, "f1": self.f1, "auc": self.auc,
                "roc": [list(p) for p in self.roc]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(int(d["level"]), float(d["threshold"]), float(d["f1"]), float(d["auc"]),
                       [tuple(p) for p in d.get("roc", [])])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"not a threshold report: {exc}") from None


def score_samples(model: CWFA, images, volumes=None, layout: LensletLayout | None = None, prior=None,
                  psf: PSFStack | None = None, rl_iterations: int = 100, label: str = UNKNOWN,
                  ids=None) -> list[OODScore]:
    """Per-level NLLs of (image, volume) pairs under ``model``.

    Without ``volumes`` each image is deconvolved with ``rl_iterations`` RL steps
    (needs ``psf``) and the score is flagged ``auto_deconvolved``. ``prior``
    defaults to the model's stored prior.
    """
    if layout is None:
        raise ValueError("score_samples needs the lenslet layout")
    images = np.asarray(images, np.float32)
    if images.ndim == 2:
        images = images[None]
    flags = []
    if volumes is None:
        if psf is None:
            raise ValueError("no volumes given and no psf to deconvolve with")
        volumes = np.stack([richardson_lucy(img, psf, rl_iterations) for img in images])
        flags = [f"auto_deconvolved:rl_iterations={rl_iterations}"]
    images, volumes = check_pairs(images, volumes)
    prior = model.prior if prior is None else torch.as_tensor(np.asarray(prior, np.float32))
    ids = list(range(len(images))) if ids is None else list(ids)
    with torch.no_grad():
        cond = build_conditions(images, layout, prior)
        nll = model.total_loglik(torch.from_numpy(volumes), cond).numpy()
    return [OODScore(row.tolist(), sid, label, list(flags)) for row, sid in zip(nll, ids)]


def score_sample(model: CWFA, image, volume=None, layout: LensletLayout | None = None, prior=None,
                 psf: PSFStack | None = None, rl_iterations: int = 100, sample_id=0, label: str = UNKNOWN) -> OODScore:
    image = check_image(image)
    if volume is not None:
        volume = check_volume(volume)[None]
    return score_samples(model, image[None], volume, layout, prior, psf, rl_iterations, label, [sample_id])[0]


def roc_auc(scores_in, scores_out):
    """AUC and ROC points, treating higher scores as "out".

    Every distinct score is a cut-point; tied in/out scores enter the curve
    together, so identical lists give exactly 0.5.
    """
    s_in = np.asarray(scores_in, np.float64).ravel()
    s_out = np.asarray(scores_out, np.float64).ravel()
    if not len(s_in) or not len(s_out):
        raise ValueError("roc_auc needs at least one in and one out score")
    cuts = np.unique(np.concatenate([s_in, s_out]))[::-1]
    # samples with score >= cut are predicted out
    tpr = np.array([0.0] + [(s_out >= c).mean() for c in cuts])
    fpr = np.array([0.0] + [(s_in >= c).mean() for c in cuts])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def _is_out(label) -> bool:
    if isinstance(label, str):
        if label not in (IN, OUT):
            raise ValueError(f"labels must be 'in' or 'out', got {label!r}")
        return label == OUT
    return bool(label)


def _f1(pred_out, true_out) -> float:
    tp = np.sum(pred_out & true_out)
    fp = np.sum(pred_out & ~true_out)
    fn = np.sum(~pred_out & true_out)
    return float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0


def select_threshold(scores, labels, n_thresholds: int = 1000, level: int = 1) -> ThresholdReport:
    """F1-maximising threshold among ``n_thresholds`` evenly spaced interior cut-points.

    Cut-points split ``[min, max]`` of the scores into ``n_thresholds + 1`` equal
    gaps, so neither extreme is a candidate. Ties go to the lowest threshold.
    ``scores`` may be floats or :class:`OODScore` (read at ``level``); labels are
    "in"/"out" or booleans (True = out).
    """
    if n_thresholds < 1:
        raise ValueError("n_thresholds must be >= 1")
    values = np.array([s.level(level) if isinstance(s, OODScore) else float(s) for s in scores])
    true_out = np.array([_is_out(lab) for lab in labels])
    if len(values) != len(true_out):
        raise ValueError(f"{len(values)} scores but {len(true_out)} labels")
    if true_out.all() or not true_out.any():
        raise ValueError("select_threshold needs both in- and out-of-distribution labels")
    cuts = np.linspace(values.min(), values.max(), n_thresholds + 2)[1:-1]
    f1s = np.array([_f1(values > c, true_out) for c in cuts])
    best = int(np.argmax(f1s))  # first maximum = lowest threshold
    auc, roc = roc_auc(values[~true_out], values[true_out])
    return ThresholdReport(level, float(cuts[best]), float(f1s[best]), auc, roc)


def classify(score, report: ThresholdReport) -> str:
    """"out" when the scored level's NLL is strictly above the threshold, else "in"."""
    value = score.level(report.level) if isinstance(score, OODScore) else float(score)
    return OUT if value > report.threshold else IN


def ood_report(scores: list[OODScore], report: ThresholdReport | None = None, level: int = 1) -> list[dict]:
    """JSON-ready rows: per_level_nll, threshold, level, decision (and auc/f1 when a report is given)."""
    rows = []
    for s in scores:
        row = {"sample_id": s.sample_id, "label": s.label, "per_level_nll": s.per_level_nll,
               "level": report.level if report else level,
               "threshold": report.threshold if report else None,
               "decision": classify(s, report) if report else UNKNOWN}
        if report:
            row.update(auc=report.auc, f1=report.f1)
        if s.flags:
            row["flags"] = s.flags
        rows.append(row)
    return rows


def write_scatter_csv(path, scores: list[OODScore], psnrs=None, level: int = 1) -> None:
    """One row per sample: id, label, NLL at ``level``, PSNR (blank when unknown)."""
    psnrs = [None] * len(scores) if psnrs is None else list(psnrs)
    if len(psnrs) != len(scores):
        raise ValueError("one PSNR per score expected")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", f"nll_level{level}", "psnr"])
        for s, p in zip(scores, psnrs):
            w.writerow([s.sample_id, s.label, repr(s.level(level)), "" if p is None else repr(float(p))])


@dataclass
class FinetuneReport:
    mode: str
    before: dict
    after: dict
    delta_pct: dict
    nll_before: list  # mean per-level NLL of the new training pairs
    nll_after: list
    seconds: float
    train: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _pct(after, before):
    return 100.0 * (after - before) / abs(before) if before else float("nan")


def _quality(model, images, volumes, layout, prior, k):
    with torch.no_grad():
        rec = model.reconstruct(build_conditions(images, layout, prior)).numpy()
    m = metrics.evaluate(volumes, rec, k=k)
    return {"psnr": m["psnr"], "mape": m["mape"], "pcc": m["pcc_mean"]}


def _mean_nll(model, images, volumes, layout, prior):
    with torch.no_grad():
        return model.total_loglik(torch.from_numpy(volumes), build_conditions(images, layout, prior)).mean(0).tolist()


def finetune(model: CWFA, new_images, new_volumes, layout: LensletLayout, eval_images, eval_volumes,
             mode: str = "only_new", existing=None, epochs: int = 100, k: int = 50,
             learning_rate: float | None = None):
    """Retrain a copy of ``model`` on new pairs; returns ``(model', FinetuneReport)``.

    ``epochs`` is split evenly over the n + 1 training stages. The prior is
    recomputed from the pairs trained on; the "before" metrics use the old
    prior. ``append_all`` trains on ``existing`` (images, volumes) plus the new
    pairs. ``eval_*`` are held-out frames of the new sample.
    """
    if mode not in ("only_new", "append_all"):
        raise ValueError(f"mode must be 'only_new' or 'append_all', got {mode!r}")
    new_images, new_volumes = check_pairs(new_images, new_volumes)
    eval_images, eval_volumes = check_pairs(eval_images, eval_volumes)
    if mode == "append_all":
        if existing is None:
            raise ValueError("mode 'append_all' needs the existing dataset")
        old_images, old_volumes = check_pairs(*existing)
        train_images = np.concatenate([old_images, new_images])
        train_volumes = np.concatenate([old_volumes, new_volumes])
    else:
        train_images, train_volumes = new_images, new_volumes

    old_prior = model.prior.clone()
    before = _quality(model, eval_images, eval_volumes, layout, old_prior, k)
    nll_before = _mean_nll(model, new_images, new_volumes, layout, old_prior)

    tuned = copy.deepcopy(model)
    cfg = replace(tuned.config, epochs=epochs, epochs_per_level=max(1, epochs // tuned.config.steps))
    if learning_rate is not None:
        cfg = replace(cfg, learning_rate=learning_rate)
    tuned.config = cfg
    prior = torch.from_numpy(train_volumes).mean(0)
    t0 = time.perf_counter()
    rep = train(tuned, build_conditions(train_images, layout, prior), torch.from_numpy(train_volumes), cfg, TrainReport())
    seconds = time.perf_counter() - t0

    after = _quality(tuned, eval_images, eval_volumes, layout, tuned.prior, k)
    nll_after = _mean_nll(tuned, new_images, new_volumes, layout, tuned.prior)
    delta = {key: _pct(after[key], before[key]) for key in before}
    log.info("fine-tune (%s): psnr %.2f -> %.2f dB in %.1f s", mode, before["psnr"], after["psnr"], seconds)
    return tuned, FinetuneReport(mode, before, after, delta, nll_before, nll_after, seconds, rep.to_dict())
