"""Retrieval scoring of canonical outputs and reconstruction scoring of voxel outputs."""

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataset.render import DepthMaskPair
from .dataset.voxelize import VoxelGrid
from .errors import ShapeError, ValidationError

CE_EPS = 1e-7
DESCRIPTOR_SIZE = 32


def _pair_arrays(c):
    if isinstance(c, DepthMaskPair):
        return c.depth, c.mask
    arr = np.asarray(c)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"expected a depth/mask pair of shape (2, H, W), got {arr.shape}")
    return arr[0], arr[1]


def descriptor(c, size=DESCRIPTOR_SIZE):
    """Masked depth area-resampled to ``size`` x ``size``, flattened, unit L2 norm.

    The predicted mask is binarized at 0.5 before masking. An empty mask gives
    the zero vector (and a warning).
    """
    depth, mask = _pair_arrays(c)
    masked = np.where(np.asarray(mask) >= 0.5, np.asarray(depth, dtype=np.float64), 0.0)
    pooled = F.adaptive_avg_pool2d(torch.from_numpy(masked)[None, None], size)[0, 0].numpy().ravel()
    norm = np.linalg.norm(pooled)
    if norm == 0:
        warnings.warn("empty mask: descriptor is the zero vector", RuntimeWarning, stacklevel=2)
        return pooled
    return pooled / norm


DESCRIPTORS = {"masked_depth": descriptor}


@dataclass
class RetrievalRanking:
    rankings: dict  # query id -> ordered list of the other ids
    labels: dict  # id -> class id

    def validate(self):
        ids = set(self.labels)
        if set(self.rankings) - ids:
            raise ValidationError("ranked queries without a class label")
        for q, order in self.rankings.items():
            if q in order or len(order) != len(ids) - 1 or set(order) != ids - {q}:
                raise ValidationError(f"ranking of {q!r} is not a permutation of the other items")
        return self


def rank_all(descriptors, labels=None):
    """Rank, for every query, all other items by ascending L2 distance (ties by id)."""
    ids = sorted(descriptors)
    if len(ids) < 2:
        raise ValidationError("ranking needs at least two items")
    dims = {np.asarray(descriptors[i]).shape for i in ids}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"descriptors must be 1-D vectors of one length, got shapes {sorted(dims)}")
    x = np.stack([np.asarray(descriptors[i], dtype=np.float64) for i in ids])
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    tie = np.arange(len(ids))  # ids are sorted, so position order is id order
    rankings = {}
    for qi, q in enumerate(ids):
        order = np.lexsort((tie, dist[qi]))
        rankings[q] = [ids[j] for j in order if j != qi]
    labels = dict(labels) if labels is not None else {i: i for i in ids}
    return RetrievalRanking(rankings, labels).validate()


@dataclass(frozen=True)
class RetrievalScores:
    nn: float
    ft: float
    st: float
    dcg: float
    n_queries: int


def _discount(pos):
    return 1.0 if pos == 1 else 1.0 / math.log2(pos)


def query_scores(order, labels, query):
    """(nn, ft, st, dcg) of one ranked list; None for a singleton class.

    Sums are correctly rounded (fsum), so results do not depend on summation order.
    """
    cls = labels[query]
    k = sum(1 for v in labels.values() if v == cls) - 1
    if k == 0:
        return None
    rel = [labels[i] == cls for i in order]
    nn = 1.0 if rel[0] else 0.0
    ft = sum(rel[:k]) / k
    st = min(sum(rel[:2 * k]) / k, 1.0)
    dcg = math.fsum(_discount(p) for p, r in enumerate(rel, 1) if r) / math.fsum(_discount(p) for p in range(1, k + 1))
    return nn, ft, st, dcg


def retrieval_metrics(r):
    per_query = {}
    skipped = []
    for q, order in r.rankings.items():
        s = query_scores(order, r.labels, q)
        if s is None:
            skipped.append(q)
        else:
            per_query[q] = s
    if skipped:
        warnings.warn(f"{len(skipped)} queries in singleton classes excluded from retrieval scores",
                      RuntimeWarning, stacklevel=2)
    if not per_query:
        raise ValidationError("every query is in a singleton class; retrieval scores are undefined")
    rows = list(per_query.values())
    means = [math.fsum(r[j] for r in rows) / len(rows) for j in range(4)]
    return RetrievalScores(*means, n_queries=len(rows))


def permutation_baseline(ranking, n_shuffles=1000, seed=0):
    """NN under random class assignment: shuffles the labels over items, keeps the rankings.

    Returns the array of ``n_shuffles`` NN scores.
    """
    ids = sorted(ranking.labels)
    values = [ranking.labels[i] for i in ids]
    rng = np.random.default_rng(seed)
    out = np.empty(n_shuffles)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for t in range(n_shuffles):
            shuffled = dict(zip(ids, rng.permutation(values)))
            out[t] = retrieval_metrics(RetrievalRanking(ranking.rankings, shuffled)).nn
    return out


def permutation_p_value(observed, null):
    """One-sided Monte-Carlo p-value of ``observed`` against the null sample."""
    return (1 + int(np.sum(null >= observed))) / (len(null) + 1)


def _grid(v):
    return v.occupancy if isinstance(v, VoxelGrid) else np.asarray(v)


def _same_resolution(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"resolution mismatch: prediction {pred.shape}, ground truth {gt.shape}")


def _check_binary(gt):
    if not np.all((gt == 0) | (gt == 1)):
        raise ValidationError("ground-truth voxels must be binary")


def iou(pred, gt, threshold=0.5):
    """|pred >= threshold AND gt| / |pred >= threshold OR gt|; 1 when both are empty."""
    pred, gt = _grid(pred), _grid(gt)
    _same_resolution(pred, gt)
    _check_binary(gt)
    p, g = pred >= threshold, gt.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def batched_iou(pred, gt, threshold=0.5):
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_resolution(pred, gt)
    return np.array([iou(p, g, threshold) for p, g in zip(pred, gt)])


def mean_cross_entropy(pred, gt):
    """Unweighted mean binary cross-entropy over all voxels, predictions clipped to [eps, 1 - eps]."""
    pred, gt = _grid(pred), _grid(gt)
    _same_resolution(pred, gt)
    _check_binary(gt)
    p = np.clip(np.asarray(pred, dtype=np.float64), CE_EPS, 1 - CE_EPS)
    g = gt.astype(np.float64)
    return float(np.mean(-(g * np.log(p) + (1 - g) * np.log(1 - p))))


RETRIEVAL_COLUMNS = ("nn", "ft", "st", "dcg")
RECON_COLUMNS = ("iou", "mean_ce")
_HEADERS = {"nn": "NN", "ft": "FT", "st": "ST", "dcg": "DCG", "iou": "IOU", "mean_ce": "CE"}


@dataclass
class MetricsReport:
    nn: float | None = None
    ft: float | None = None
    st: float | None = None
    dcg: float | None = None
    iou: float | None = None
    mean_ce: float | None = None
    per_fold: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def columns(self):
        cols = []
        if self.nn is not None:
            cols += RETRIEVAL_COLUMNS
        if self.iou is not None:
            cols += RECON_COLUMNS
        return cols

    def validate(self):
        for k in ("nn", "ft", "st", "dcg", "iou"):
            v = getattr(self, k)
            if v is not None and not 0 <= v <= 1:
                raise ValidationError(f"{k} = {v} outside [0, 1]")
        if self.mean_ce is not None and not self.mean_ce >= 0:
            raise ValidationError(f"mean_ce = {self.mean_ce} is negative")
        return self

    @classmethod
    def aggregate(cls, folds, extras=None):
        """Mean over folds; each fold is a dict with a ``fold`` key and metric values."""
        if not folds:
            raise ValidationError("no folds to aggregate")
        means = {}
        for k in RETRIEVAL_COLUMNS + RECON_COLUMNS:
            vals = [f[k] for f in folds if f.get(k) is not None]
            means[k] = float(np.mean(vals)) if vals else None
        return cls(**means, per_fold=list(folds), extras=dict(extras or {})).validate()

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def _rows(self):
        cols = self.columns()
        rows = [[str(f.get("fold", i))] + [f.get(c) for c in cols] for i, f in enumerate(self.per_fold)]
        rows.append(["mean"] + [getattr(self, c) for c in cols])
        return cols, rows

    def to_text(self, title=None):
        cols, rows = self._rows()
        head = ["fold"] + [_HEADERS[c] for c in cols]
        body = [[r[0]] + ["-" if v is None else f"{v:.3f}" for v in r[1:]] for r in rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        fmt = lambda r: "  ".join(s.rjust(w) for s, w in zip(r, widths))
        lines = ([title] if title else []) + [fmt(head), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in body]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        cols, rows = self._rows()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", *[_HEADERS[c] for c in cols]])
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in r])
        return buf.getvalue()


def retrieval_report(canonical, ids, labels, descriptor_fn=descriptor):
    """Descriptor -> ranking -> scores for (N, 2, H, W) canonical pairs."""
    descs = {i: descriptor_fn(c) for i, c in zip(ids, np.asarray(canonical))}
    ranking = rank_all(descs, {i: labels[i] for i in ids})
    return retrieval_metrics(ranking), ranking


def evaluate_fold(stage1_ckpt, stage2_ckpt, split, data, mode="both", descriptor_fn=descriptor,
                  n_shuffles=1000, seed=0):
    """Score one fold's test samples; returns a dict of metric values.

    ``stage1_ckpt="oracle"`` passes the ground-truth canonical pairs through,
    which bounds what any canonicalizer can reach under this descriptor.
    """
    from .training import canonicalize, load_stage1_model, load_stage2_model, reconstruct
    from .checkpoint import model_fingerprint

    if mode not in ("retrieval", "recon", "both"):
        raise ValidationError(f"mode must be retrieval, recon or both, got {mode!r}")
    ids = list(split.test_samples)
    if not ids:
        raise ValidationError("the test split is empty")
    idx = data.index_of(ids)
    posed = torch.as_tensor(data.posed[idx])
    if isinstance(stage1_ckpt, str) and stage1_ckpt == "oracle":
        canon = torch.as_tensor(data.canonical[idx])
        stage1_fp = None
    else:
        stage1 = load_stage1_model(stage1_ckpt)
        if tuple(stage1.cfg.input_resolution) != data.resolution:
            raise ShapeError(f"checkpoint expects {stage1.cfg.input_resolution} inputs, data is {data.resolution}")
        canon = canonicalize(stage1, posed)
        stage1_fp = model_fingerprint(stage1, stage1.cfg.fingerprint())
    out = {"fold": fold_name(split.fold), "n_test": len(ids)}
    if mode in ("retrieval", "both"):
        labels = dict(zip(data.ids, data.subject_ids))
        scores, ranking = retrieval_report(canon.numpy(), ids, labels, descriptor_fn)
        null = permutation_baseline(ranking, n_shuffles, seed)
        out.update(nn=scores.nn, ft=scores.ft, st=scores.st, dcg=scores.dcg,
                   nn_baseline_mean=float(null.mean()), nn_baseline_q95=float(np.quantile(null, 0.95)),
                   nn_p_value=permutation_p_value(scores.nn, null))
    if mode in ("recon", "both"):
        if stage2_ckpt is None:
            raise ValidationError("reconstruction scores need a stage-two checkpoint")
        gen = load_stage2_model(stage2_ckpt, stage1_fingerprint=stage1_fp)
        if gen.cfg.voxel_resolution != data.voxel_resolution:
            raise ShapeError(f"checkpoint emits {gen.cfg.voxel_resolution}^3 grids, data has "
                             f"{data.voxel_resolution}^3")
        pred = reconstruct(gen, posed, canon).numpy()
        gt = data.voxels[idx]
        out.update(iou=float(np.mean(batched_iou(pred, gt))),
                   mean_ce=float(np.mean([mean_cross_entropy(p, g) for p, g in zip(pred, gt)])))
    return out


def fold_name(fold):
    if isinstance(fold, (tuple, list)) and len(fold) == 2:
        return f"s{fold[0]}p{fold[1]}"
    return str(fold)
