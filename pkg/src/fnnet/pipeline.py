"""Orchestration: RANSAC baseline, pose-error metrics and evaluation
reports, and the per-record training loop with JSON checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import datagen, geometry as geo, model as fnmodel
from .diffcore import Adam, NumericError
from .serialize import fmt_float

__all__ = [
    "RansacConfig",
    "RansacResult",
    "ransac_essential",
    "EvalReport",
    "evaluate",
    "fnnet_predictor",
    "ransac_predictor",
    "ground_truth_predictor",
    "map5_from_errors",
    "train",
]

FAILURE_ERROR_DEG = 180.0


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    threshold: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise geo.GeometryError("iterations must be at least 1")
        if self.threshold <= 0:
            raise geo.GeometryError("inlier threshold must be positive")


@dataclass
class RansacResult:
    essential: geo.EssentialMatrix
    mask: np.ndarray
    ok: bool


def ransac_essential(corrs, cfg=RansacConfig()):
    """Classic RANSAC over eight-point minimal samples, batched.

    Each hypothesis solves the eight-point problem on 8 distinct
    correspondences; support is counted by symmetric epipolar distance
    below the threshold.  The best hypothesis is refit with the
    weighted eight-point solve on its 0/1 support mask.  Deterministic
    per seed; ``ok`` is False when no hypothesis gathered 8 inliers.
    """
    pts = corrs.points if isinstance(corrs, geo.CorrespondenceSet) else np.asarray(corrs)
    n = pts.shape[0]
    if n < 8:
        raise geo.InsufficientSupportError("RANSAC needs at least 8 correspondences")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    x = geo.build_design_matrix(pts)
    iters = cfg.iterations
    samples = np.empty((iters, 8), dtype=np.int64)
    for i in range(iters):
        samples[i] = rng.choice(n, size=8, replace=False)
    xs = x[samples]                                   # (iters, 8, 9)
    g = np.einsum("bij,bik->bjk", xs, xs)
    vals, vecs = geo.jacobi_eigh(g)
    gnorm = np.sqrt(np.einsum("bij,bij->b", g, g))
    valid = (vals[:, 1] - vals[:, 0]) / np.maximum(gnorm, 1e-300) >= geo.EIGENGAP_TOL
    e_all = vecs[:, :, 0]                             # (iters, 9), unit norm
    # support count for every hypothesis at once
    x1h = np.column_stack([pts[:, 0], pts[:, 1], np.ones(n)])
    x2h = np.column_stack([pts[:, 2], pts[:, 3], np.ones(n)])
    em = e_all.reshape(iters, 3, 3)
    l1 = np.einsum("bij,nj->bni", em, x1h)
    l2 = np.einsum("bji,nj->bni", em, x2h)
    resid = np.einsum("ni,bni->bn", x2h, l1)
    n1 = l1[:, :, 0] ** 2 + l1[:, :, 1] ** 2
    n2 = l2[:, :, 0] ** 2 + l2[:, :, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = resid**2 * (1.0 / n1 + 1.0 / n2)
    d = np.where(np.isfinite(d), d, np.inf)
    support = (d < cfg.threshold).sum(axis=1)
    support = np.where(valid, support, -1)
    best = int(np.argmax(support))
    best_mask = d[best] < cfg.threshold
    best_e = geo.EssentialMatrix(
        geo._fix_sign(e_all[best])[0].reshape(3, 3)
    )
    ok = int(support[best]) >= 8
    if ok:
        try:
            refit = geo.weighted_eight_point(pts, best_mask.astype(np.float64))
            best_e = refit
        except geo.GeometryError:
            pass
    final_mask = geo.classify_by_epipolar(pts, best_e, cfg.threshold)
    return RansacResult(best_e, final_mask, ok)


# -- metrics and evaluation ----------------------------------------------


def map5_from_errors(errors):
    """Mean accuracy over 1..5 degree thresholds, in percent.

    A pair counts as correct at threshold T when max(err_R, err_t) < T.
    """
    if not errors:
        return 0.0
    worst = np.array([max(er, et) for er, et in errors])
    accs = [(worst < thr).mean() for thr in (1.0, 2.0, 3.0, 4.0, 5.0)]
    return float(np.mean(accs) * 100.0)


@dataclass
class EvalReport:
    map5: float
    precision: float                # percent
    recall: float                   # percent
    f_score: float                  # ratio in [0, 1]
    pairs: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self):
        pair_entries = ", ".join(
            "{"
            + f'"pair_id": {json.dumps(p)}, "err_r_deg": {fmt_float(er)}, '
            + f'"err_t_deg": {fmt_float(et)}'
            + "}"
            for p, er, et in self.pairs
        )
        return (
            "{"
            + f'"map5": {fmt_float(self.map5)}, '
            + f'"precision": {fmt_float(self.precision)}, '
            + f'"recall": {fmt_float(self.recall)}, '
            + f'"f_score": {fmt_float(self.f_score)}, '
            + f'"pairs": [{pair_entries}]'
            + "}"
        )

    def summary(self):
        return (
            f"map5 {self.map5:.2f}  precision {self.precision:.2f}  "
            f"recall {self.recall:.2f}  f_score {self.f_score:.4f}  "
            f"pairs {len(self.pairs)}"
        )


def _pair_seed(base, pair_id):
    return [base, datagen._pair_key(pair_id)]


def fnnet_predictor(model):
    """Wrap a trained model as ``record -> (weights, EssentialMatrix)``."""

    def predict(record):
        corrs = datagen.record_correspondences(record)
        pred = model.forward(corrs, mode="eval")
        return pred.weights, pred.essential

    return predict


def ransac_predictor(cfg=RansacConfig()):
    """Plain RANSAC as a predictor; weights are its 0/1 inlier mask."""

    def predict(record):
        corrs = datagen.record_correspondences(record)
        seed = np.random.SeedSequence(_pair_seed(cfg.seed, record.pair_id)).generate_state(1)[0]
        res = ransac_essential(corrs, RansacConfig(cfg.iterations, cfg.threshold, int(seed)))
        return res.mask.astype(np.float64), res.essential

    return predict


def ground_truth_predictor(record):
    """Oracle predictor: ground-truth labels and pose."""
    weights = record.labels.astype(np.float64)
    e = geo.essential_from_pose(record.pose)
    return weights, e


def evaluate(records, predict_fn, use_ransac_post=False, ransac_cfg=None):
    """Run a predictor over a dataset and score it.

    Per record the predictor supplies inlier weights and an essential
    matrix; with RANSAC post-processing the matrix is re-estimated by
    RANSAC restricted to the predicted-positive correspondences.  Pose
    errors come from cheirality-voted decomposition (failures score 180
    degrees); precision/recall are micro-averaged over all
    correspondences with "weight > 0" as the positive criterion.
    """
    if not records:
        raise geo.GeometryError("cannot evaluate an empty dataset")
    if ransac_cfg is None:
        ransac_cfg = RansacConfig()
    errors = []
    pairs = []
    tp = fp = fn_count = 0
    for record in records:
        corrs = datagen.record_correspondences(record)
        weights, e = predict_fn(record)
        positive = weights > 0
        if use_ransac_post and int(positive.sum()) >= 8:
            sub = geo.CorrespondenceSet(corrs.points[positive])
            seed = np.random.SeedSequence(
                _pair_seed(ransac_cfg.seed, record.pair_id)
            ).generate_state(1)[0]
            res = ransac_essential(
                sub,
                RansacConfig(ransac_cfg.iterations, ransac_cfg.threshold, int(seed)),
            )
            if res.ok:
                e = res.essential
        err_r = err_t = FAILURE_ERROR_DEG
        if e is not None:
            try:
                vote_mask = positive if positive.any() else None
                pose = geo.decompose_essential(e, corrs, mask=vote_mask)
                err_r, err_t = geo.pose_angular_errors(record.pose, pose)
            except geo.GeometryError:
                pass
        errors.append((err_r, err_t))
        pairs.append((record.pair_id, err_r, err_t))
        truth = record.labels
        tp += int(np.count_nonzero(positive & truth))
        fp += int(np.count_nonzero(positive & ~truth))
        fn_count += int(np.count_nonzero(~positive & truth))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn_count) if tp + fn_count > 0 else 0.0
    f_score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        map5=map5_from_errors(errors),
        precision=100.0 * precision,
        recall=100.0 * recall,
        f_score=f_score,
        pairs=pairs,
    )


# -- training ------------------------------------------------------------


def train(train_records, val_records, config, epochs, checkpoint_path,
          seed=0, lr=1e-3, log_fn=None):
    """Per-record SGD training with Adam; returns (model, log lines).

    Records are shuffled each epoch with a seeded stream; a checkpoint
    is written after every epoch.  A non-finite loss aborts training,
    leaving the last completed epoch's checkpoint in place.
    """
    if not train_records:
        raise datagen.DatagenError("empty training set")
    model = fnmodel.FNNet(config, seed=seed)
    opt = Adam(model.parameters(), lr=lr)
    log = []

    def emit(line):
        log.append(line)
        if log_fn is not None:
            log_fn(line)

    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch])
        ).permutation(len(train_records))
        cls_sum = ess_sum = 0.0
        ess_count = 0
        try:
            for idx in order:
                record = train_records[idx]
                corrs = datagen.record_correspondences(record)
                pred = model.forward(corrs, mode="train")
                total = fnmodel.loss(pred, record, epoch, config)
                opt.zero_grad()
                total.backward()
                opt.step()
                # split the logged terms back out for the epoch summary
                cls_val = _classification_term(pred, record)
                cls_sum += cls_val
                if pred.essential_t is not None:
                    ess_sum += _essential_term(pred, record)
                    ess_count += 1
        except NumericError as exc:
            emit(f"epoch {epoch} aborted: {exc}")
            break
        mean_cls = cls_sum / len(train_records)
        mean_ess = ess_sum / ess_count if ess_count else 0.0
        if val_records:
            report = evaluate(val_records, fnnet_predictor(model))
            emit(
                f"epoch {epoch} cls {mean_cls:.6f} ess {mean_ess:.6f} "
                f"val_f {report.f_score:.4f} val_map5 {report.map5:.2f}"
            )
        else:
            emit(f"epoch {epoch} cls {mean_cls:.6f} ess {mean_ess:.6f}")
        fnmodel.save_checkpoint(checkpoint_path, model, epoch)
    return model, log


def _classification_term(pred, record):
    labels = record.labels.astype(np.float64)
    n = labels.shape[0]
    n_pos = labels.sum()
    n_neg = n - n_pos
    w_pos = n / (2.0 * n_pos) if n_pos > 0 else 0.0
    w_neg = n / (2.0 * n_neg) if n_neg > 0 else 0.0
    w = np.where(labels > 0, w_pos, w_neg)
    z = pred.logits
    bce = np.logaddexp(0.0, z) - z * labels
    return float((w * bce).mean())


def _essential_term(pred, record):
    e_gt = fnmodel.essential_target(record)
    e_hat = pred.essential.m.reshape(-1)
    return float(min(np.sum((e_hat - e_gt) ** 2), np.sum((e_hat + e_gt) ** 2)))
