"""Stage-wise linear detector over conv-layer statistics.

Adversarial is the positive class throughout. Each stage scores the
concatenated statistic vectors of conv layers 1..k; images scoring below the
stage threshold exit as normal, survivors of every stage are flagged
adversarial. Thresholds are calibrated so a target fraction of training
adversarials keeps flowing downstream. The detector reads only forward
activations; it has no gradient path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .featstats import feature_matrix
from .tensor import Tensor

__all__ = [
    "LinearSvm",
    "CascadeStage",
    "CascadeModel",
    "CascadeConfig",
    "CascadeDecision",
    "train_svm",
    "svm_objective",
    "calibrate_threshold",
    "train_cascade",
    "cascade_predict",
    "cascade_predict_batch",
    "detector_score",
    "detector_score_batch",
    "RocCurve",
    "roc_auc",
    "compose_rates",
    "accuracy_at_threshold",
    "best_threshold_accuracy",
]

SURVIVOR_OFFSET = 1.0  # added to survivor scores so they rank above every exiter


@dataclass
class LinearSvm:
    """L2-regularized hinge-loss classifier on standardized features."""

    weights: np.ndarray
    bias: float
    c: float
    seed: int
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def __post_init__(self):
        d = self.weights.shape[0]
        if d < 1:
            raise ValidationError("feature dimension must be positive")
        if self.feature_means.shape != (d,) or self.feature_stds.shape != (d,):
            raise ValidationError("standardization arrays must match the weight length")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise ValidationError("svm parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def decision_scores(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValidationError(f"features must be (N, {self.dim}), got {x.shape}")
        xs = (x - self.feature_means) / self.feature_stds
        return xs @ self.weights + self.bias


def _standardize_params(x: np.ndarray):
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    # Columns whose variation is numerical dust relative to their own scale
    # carry no signal; scaling dust up to unit variance would mint fake
    # features whose weights then explode on out-of-support inputs.
    floor = 1e-7 * np.maximum(1.0, np.abs(means))
    stds = np.where(stds > floor, stds, 1.0)
    return means, stds


def svm_objective(weights, bias, xs, y, lam) -> float:
    """(lam/2)||w||^2 + mean hinge on standardized features (bias regularized)."""
    margins = y * (xs @ weights + bias)
    hinge = np.maximum(0.0, 1.0 - margins)
    return 0.5 * lam * (weights @ weights + bias * bias) + hinge.mean()


def train_svm(x, y, c: float = 0.005, seed: int = 0, iters: int = 2000) -> LinearSvm:
    """Deterministic full-batch subgradient descent with best-iterate tracking.

    The regularization weight is lam = 1 / (c * n); steps follow the
    1/(lam * t) schedule. The bias rides along as an always-one feature, so it
    is regularized too.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("need a feature matrix and one label per row")
    if not np.isfinite(x).all():
        raise ValidationError("feature rows must be finite")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise ValidationError("labels must be -1 (normal) or +1 (adversarial)")
    if (y > 0).sum() == 0 or (y < 0).sum() == 0:
        raise ValidationError("both classes must be present")
    if c <= 0:
        raise ValidationError("regularization parameter c must be positive")
    n, d = x.shape
    means, stds = _standardize_params(x)
    xs = (x - means) / stds
    aug = np.concatenate([xs, np.ones((n, 1))], axis=1)
    lam = 1.0 / (c * n)
    w = np.zeros(d + 1)
    best_w = w.copy()
    best_obj = svm_objective(w[:d], w[d], xs, y, lam)
    for t in range(1, iters + 1):
        margins = y * (aug @ w)
        viol = margins < 1.0
        grad = lam * w - (y[viol] @ aug[viol]) / n
        w = w - grad / (lam * (t + 1))
        obj = svm_objective(w[:d], w[d], xs, y, lam)
        if obj < best_obj:
            best_obj = obj
            best_w = w.copy()
    return LinearSvm(weights=best_w[:d], bias=float(best_w[d]), c=float(c),
                     seed=int(seed), feature_means=means, feature_stds=stds)


def calibrate_threshold(scores, labels, target_tpr: float) -> float:
    """Largest threshold keeping at least target_tpr of adversarials at or above it.

    Scores are adversarialness (high = adversarial); an example counts as
    flagged when score >= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[np.asarray(labels) > 0]
    if pos.size == 0:
        raise ValidationError("calibration set contains no adversarial examples")
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError("target TPR must lie in (0, 1]")
    k = int(np.ceil(target_tpr * pos.size))
    ordered = np.sort(pos)[::-1]
    return float(ordered[k - 1])


@dataclass
class CascadeStage:
    """One stage: the SVM over layers 1..layer_index features plus its threshold."""

    layer_index: int
    svm: LinearSvm
    tau: float
    fpr: float | None = None
    tpr: float | None = None

    @property
    def input_dim(self) -> int:
        return self.svm.dim


@dataclass
class CascadeModel:
    stages: tuple
    banks: tuple
    target_tpr: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("cascade needs at least one stage")
        if len(self.stages) > len(self.banks):
            raise ValidationError("more stages than fitted banks")
        for i, stage in enumerate(self.stages):
            if stage.layer_index != i + 1:
                raise ValidationError("stages must cover conv layers 1..K in order")


@dataclass(frozen=True)
class CascadeConfig:
    target_tpr: float = 0.97
    svm_c: float = 0.005
    seed: int = 0
    svm_iters: int = 2000
    max_stages: int | None = None

    def __post_init__(self):
        if not 0.0 < self.target_tpr <= 1.0:
            raise ValidationError("target TPR must lie in (0, 1]")
        if self.svm_c <= 0:
            raise ValidationError("svm C must be positive")


def train_cascade(normal_pool, adv_train, network, banks, config=CascadeConfig(),
                  val_normals=None, val_adversarials=None) -> CascadeModel:
    """Stage-by-stage training with pool elimination.

    Per stage: draw a balanced subset of still-alive pool normals, train the
    SVM against all training adversarials on layers 1..k features, calibrate
    the threshold at the target TPR on the training adversarials, then drop
    pool normals that score below it. Stops when conv layers run out or the
    pool empties. Stage rates come from the validation pair when given,
    otherwise from the stage's own training data.
    """
    pool = np.asarray(normal_pool, dtype=np.float64)
    advs = np.asarray(adv_train, dtype=np.float64)
    if pool.ndim != 4 or advs.ndim != 4:
        raise ValidationError("image sets must be N x H x W x C")
    n_p = len(advs)
    if n_p == 0:
        raise ValidationError("training adversarial set is empty")
    if len(pool) < n_p:
        raise ValidationError(f"normal pool ({len(pool)}) smaller than adversarial set ({n_p})")
    banks = tuple(banks)
    n_layers = min(len(banks), network.spec.conv_count)
    if config.max_stages is not None:
        n_layers = min(n_layers, config.max_stages)
    if n_layers < 1:
        raise ValidationError("need at least one conv layer with a fitted bank")

    rng = np.random.default_rng(config.seed)
    pool_feats = feature_matrix(network, pool, banks, upto_layer=n_layers)
    adv_feats = feature_matrix(network, advs, banks, upto_layer=n_layers)
    val_feats = None
    if val_normals is not None and val_adversarials is not None:
        val_feats = (
            feature_matrix(network, np.asarray(val_normals, dtype=np.float64),
                           banks, upto_layer=n_layers),
            feature_matrix(network, np.asarray(val_adversarials, dtype=np.float64),
                           banks, upto_layer=n_layers),
        )

    dims = np.cumsum([6 * b.k for b in banks[:n_layers]])
    alive = np.arange(len(pool))
    val_alive_n = None if val_feats is None else np.arange(len(val_feats[0]))
    val_alive_a = None if val_feats is None else np.arange(len(val_feats[1]))
    stages = []
    for m in range(1, n_layers + 1):
        if alive.size == 0:
            break
        cols = slice(0, dims[m - 1])
        draw = rng.choice(alive, size=min(n_p, alive.size), replace=False)
        x = np.concatenate([pool_feats[draw, cols], adv_feats[:, cols]])
        y = np.concatenate([-np.ones(len(draw)), np.ones(n_p)])
        svm = train_svm(x, y, c=config.svm_c, seed=config.seed, iters=config.svm_iters)
        adv_scores = svm.decision_scores(adv_feats[:, cols])
        tau = calibrate_threshold(adv_scores, np.ones(n_p), config.target_tpr)

        if val_feats is not None:
            sn = svm.decision_scores(val_feats[0][val_alive_n, cols])
            sa = svm.decision_scores(val_feats[1][val_alive_a, cols])
            fpr = float((sn >= tau).mean()) if sn.size else float("nan")
            tpr = float((sa >= tau).mean()) if sa.size else float("nan")
            val_alive_n = val_alive_n[sn >= tau]
            val_alive_a = val_alive_a[sa >= tau]
        else:
            pool_scores_now = svm.decision_scores(pool_feats[alive, cols])
            fpr = float((pool_scores_now >= tau).mean())
            tpr = float((adv_scores >= tau).mean())

        stages.append(CascadeStage(layer_index=m, svm=svm, tau=tau, fpr=fpr, tpr=tpr))
        pool_scores = svm.decision_scores(pool_feats[alive, cols])
        alive = alive[pool_scores >= tau]

    return CascadeModel(
        stages=tuple(stages),
        banks=banks[:n_layers],
        target_tpr=config.target_tpr,
        metadata={"svm_c": config.svm_c, "seed": config.seed,
                  "pool_size": int(len(pool)), "adv_train_size": int(n_p),
                  "pool_survivors": int(alive.size)},
    )


@dataclass
class CascadeDecision:
    """Outcome of one cascade evaluation.

    decision is "normal" or "adversarial"; exit_stage is the 1-based stage
    that released a normal image, None for survivors; stage_scores lists the
    adversarialness score of every stage that was evaluated.
    """

    decision: str
    exit_stage: int | None
    stage_scores: list


def _batch_scores(model: CascadeModel, network, images):
    feats = feature_matrix(network, images, model.banks, upto_layer=len(model.stages))
    dims = np.cumsum([6 * b.k for b in model.banks[: len(model.stages)]])
    n = len(feats)
    exit_stage = np.full(n, -1, dtype=np.int64)
    scores = np.full((n, len(model.stages)), np.nan)
    alive = np.arange(n)
    for i, stage in enumerate(model.stages):
        if alive.size == 0:
            break
        s = stage.svm.decision_scores(feats[alive, : dims[i]])
        scores[alive, i] = s
        exited = s < stage.tau
        exit_stage[alive[exited]] = i + 1
        alive = alive[~exited]
    return exit_stage, scores


def cascade_predict_batch(model: CascadeModel, network, images):
    """(is_adversarial, exit_stage, stage_scores) arrays for a batch.

    exit_stage is -1 for survivors; stage_scores holds NaN past the exit.
    """
    exit_stage, scores = _batch_scores(model, network, images)
    return exit_stage < 0, exit_stage, scores


def cascade_predict(model: CascadeModel, network, image: Tensor) -> CascadeDecision:
    """Evaluate stages in order; exit normal at the first stage below threshold."""
    is_adv, exit_stage, scores = cascade_predict_batch(model, network, image.array[None])
    row = scores[0]
    evaluated = [float(v) for v in row[~np.isnan(row)]]
    if is_adv[0]:
        return CascadeDecision("adversarial", None, evaluated)
    return CascadeDecision("normal", int(exit_stage[0]), evaluated)


def detector_score_batch(model: CascadeModel, network, images) -> np.ndarray:
    """Scalar adversarialness per image.

    Exiters at stage k score s_k - tau_k (negative); survivors score their
    final-stage margin plus a fixed offset, so every survivor ranks above
    every exiter and thresholding at 0 reproduces the cascade decisions.
    """
    exit_stage, scores = _batch_scores(model, network, images)
    taus = np.array([stage.tau for stage in model.stages])
    out = np.empty(len(exit_stage))
    for i, exited_at in enumerate(exit_stage):
        if exited_at < 0:
            k = len(model.stages) - 1
            out[i] = scores[i, k] - taus[k] + SURVIVOR_OFFSET
        else:
            out[i] = scores[i, exited_at - 1] - taus[exited_at - 1]
    return out


def detector_score(model: CascadeModel, network, image: Tensor) -> float:
    return float(detector_score_batch(model, network, image.array[None])[0])


@dataclass
class RocCurve:
    """Threshold sweep points (threshold, fpr, tpr) and the tie-aware AUC."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """Full-sweep ROC plus AUC equal to the tie-aware pair statistic.

    AUC is computed from average ranks, which matches exhaustive pair counting
    (1 per correctly ordered pair, 0.5 per tie) exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("need aligned 1-D scores and labels")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both classes present")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u / (n_pos * n_neg)

    uniq = np.unique(scores)[::-1]
    thresholds = np.concatenate([[np.inf], uniq])
    fpr = np.empty(len(thresholds))
    tpr = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        flagged = scores >= t
        fpr[i] = (flagged & ~labels).sum() / n_neg
        tpr[i] = (flagged & labels).sum() / n_pos
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=float(auc))


def compose_rates(stage_rates) -> tuple[float, float]:
    """Overall (false positive, true positive) rate of a cascade: products."""
    f = 1.0
    t = 1.0
    count = 0
    for fi, ti in stage_rates:
        if not (0.0 <= fi <= 1.0 and 0.0 <= ti <= 1.0):
            raise ValidationError("stage rates must lie in [0, 1]")
        f *= fi
        t *= ti
        count += 1
    if count == 0:
        raise ValidationError("need at least one stage rate")
    return f, t


def accuracy_at_threshold(scores, labels, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    return float(((scores >= threshold) == labels).mean())


def best_threshold_accuracy(scores, labels) -> tuple[float, float]:
    """(threshold, accuracy) of the most accurate operating point on the sweep."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    best = (float("inf"), -1.0)
    for t in candidates:
        acc = accuracy_at_threshold(scores, labels, t)
        if acc > best[1]:
            best = (float(t), acc)
    return best
