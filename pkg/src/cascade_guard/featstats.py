"""Per-layer statistics of convolutional filter outputs.

Every pixel of a conv-layer output is treated as one K-dimensional sample.
A bank fitted on normal images provides the mean, an orthonormal projection
and per-dimension standard deviations; each image is then summarized by the
mean absolute normalized projection coefficient per dimension, plus per
channel extrema and percentiles. All extractors are order statistics or
absolute means, so nothing here is differentiable end to end and the module
never touches gradient machinery.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

__all__ = [
    "PcaBank",
    "LayerStatVector",
    "fit_pca_bank",
    "pca_statistic",
    "extremal_stats",
    "percentile_stats",
    "layer_feature_vector",
    "stat_matrix",
    "feature_matrix",
    "feature_names",
    "SpectralReport",
    "spectral_report",
    "write_feature_csv",
]

PERCENTILES = (25.0, 50.0, 75.0)


@dataclass(frozen=True)
class PcaBank:
    """Mean, orthonormal projection and projection stds for one conv layer.

    Columns of `components` are eigenvectors of the pixel-sample covariance in
    descending eigenvalue order, signs fixed so the largest-magnitude entry of
    each column is positive. Stds below `epsilon` are floored to it.
    """

    layer_index: int
    mean: np.ndarray
    components: np.ndarray
    stds: np.ndarray
    epsilon: float = 1e-8

    def __post_init__(self):
        k = self.mean.shape[0]
        if self.components.shape != (k, k) or self.stds.shape != (k,):
            raise ValidationError(
                f"bank arrays disagree: mean {self.mean.shape}, "
                f"W {self.components.shape}, s {self.stds.shape}"
            )
        gram = self.components.T @ self.components
        if np.abs(gram - np.eye(k)).max() > 1e-8:
            raise ValidationError("projection matrix is not orthonormal")
        if self.epsilon <= 0 or (self.stds < self.epsilon).any():
            raise ValidationError("stds must be floored at a positive epsilon")

    @property
    def k(self) -> int:
        return self.mean.shape[0]


def _pixels(layer_output) -> np.ndarray:
    arr = layer_output.array if isinstance(layer_output, Tensor) else np.asarray(
        layer_output, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"layer output must be H x W x K, got shape {arr.shape}")
    return arr.reshape(-1, arr.shape[2])


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive, first index on ties.
    out = components.copy()
    for col in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, col])))
        if out[i, col] < 0:
            out[:, col] = -out[:, col]
    return out


def fit_pca_bank(layer_outputs, layer_index: int, epsilon: float = 1e-8) -> PcaBank:
    """Fit mean, projection and stds from normal-image layer outputs.

    Accepts an (N, H, W, K) array or a list of H x W x K outputs; every pixel
    of every image is one sample. Requires at least K samples.
    """
    if isinstance(layer_outputs, np.ndarray) and layer_outputs.ndim == 4:
        k = layer_outputs.shape[3]
        samples = layer_outputs.reshape(-1, k)
    else:
        parts = [_pixels(out) for out in layer_outputs]
        if not parts:
            raise ValidationError("need at least one layer output")
        samples = np.concatenate(parts)
        k = samples.shape[1]
    n = samples.shape[0]
    if n < k:
        raise ValidationError(f"need at least {k} pixel samples, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    components = _fix_signs(eigvecs[:, order])
    proj = centered @ components
    stds = np.maximum(proj.std(axis=0), epsilon)
    return PcaBank(layer_index=int(layer_index), mean=mean, components=components,
                   stds=stds, epsilon=float(epsilon))


def pca_statistic(layer_output, bank: PcaBank) -> np.ndarray:
    """Mean absolute std-normalized projection coefficient per dimension."""
    pixels = _pixels(layer_output)
    if pixels.shape[1] != bank.k:
        raise ValidationError(
            f"layer output has {pixels.shape[1]} channels but bank expects {bank.k}"
        )
    z = (pixels - bank.mean) @ bank.components / bank.stds
    return np.abs(z).mean(axis=0)


def extremal_stats(layer_output) -> np.ndarray:
    """Per-channel minimum then maximum over all pixels: a 2K vector."""
    pixels = _pixels(layer_output)
    return np.concatenate([pixels.min(axis=0), pixels.max(axis=0)])


def _percentile_rows(sorted_vals: np.ndarray, p: float) -> np.ndarray:
    # Linear interpolation at rank (p / 100) * (n - 1) in the sorted sample.
    n = sorted_vals.shape[0]
    rank = (p / 100.0) * (n - 1)
    lo = int(np.floor(rank))
    frac = rank - lo
    if lo + 1 >= n:
        return sorted_vals[lo].copy()
    return sorted_vals[lo] + (sorted_vals[lo + 1] - sorted_vals[lo]) * frac


def percentile_stats(layer_output, ps=PERCENTILES) -> np.ndarray:
    """Per-channel percentiles over all pixels, concatenated per percentile."""
    pixels = _pixels(layer_output)
    sorted_vals = np.sort(pixels, axis=0)
    return np.concatenate([_percentile_rows(sorted_vals, p) for p in ps])


@dataclass
class LayerStatVector:
    """The 6K statistic vector of one conv layer for one image.

    Concatenation order is fixed: [pca | min | max | p25 | p50 | p75].
    """

    layer_index: int
    pca: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray
    p25: np.ndarray
    p50: np.ndarray
    p75: np.ndarray

    def __post_init__(self):
        k = self.pca.shape[0]
        for name in ("mins", "maxs", "p25", "p50", "p75"):
            if getattr(self, name).shape != (k,):
                raise ValidationError(f"{name} must have length {k}")
        ordered = (
            (self.mins <= self.p25 + 1e-12)
            & (self.p25 <= self.p50 + 1e-12)
            & (self.p50 <= self.p75 + 1e-12)
            & (self.p75 <= self.maxs + 1e-12)
        )
        if not ordered.all():
            raise ValidationError("per-channel order min <= p25 <= p50 <= p75 <= max broken")

    @property
    def k(self) -> int:
        return self.pca.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.pca, self.mins, self.maxs, self.p25, self.p50, self.p75])


def layer_feature_vector(network, image: Tensor, layer_index: int,
                         bank: PcaBank) -> LayerStatVector:
    """Statistic vector of one conv layer (1-based index) for one image."""
    from .victim import layer_outputs

    outputs = layer_outputs(network, image)
    if not 1 <= layer_index <= len(outputs):
        raise ValidationError(
            f"layer index {layer_index} out of range (network has {len(outputs)} conv layers)"
        )
    out = outputs[layer_index - 1]
    ex = extremal_stats(out)
    pc = percentile_stats(out)
    k = out.channels
    return LayerStatVector(
        layer_index=int(layer_index),
        pca=pca_statistic(out, bank),
        mins=ex[:k], maxs=ex[k:],
        p25=pc[:k], p50=pc[k : 2 * k], p75=pc[2 * k :],
    )


def stat_matrix(layer_batch: np.ndarray, bank: PcaBank) -> np.ndarray:
    """(N, 6K) statistic rows for a batch of layer outputs (N, H, W, K)."""
    n, h, w, k = layer_batch.shape
    if k != bank.k:
        raise ValidationError(f"batch has {k} channels but bank expects {bank.k}")
    pixels = layer_batch.reshape(n, h * w, k)
    z = (pixels - bank.mean) @ bank.components / bank.stds
    pca = np.abs(z).mean(axis=1)
    mins = pixels.min(axis=1)
    maxs = pixels.max(axis=1)
    sorted_vals = np.sort(pixels, axis=1)
    pcs = []
    npix = h * w
    for p in PERCENTILES:
        rank = (p / 100.0) * (npix - 1)
        lo = int(np.floor(rank))
        frac = rank - lo
        if lo + 1 >= npix:
            pcs.append(sorted_vals[:, lo, :].copy())
        else:
            lo_vals = sorted_vals[:, lo, :]
            pcs.append(lo_vals + (sorted_vals[:, lo + 1, :] - lo_vals) * frac)
    return np.concatenate([pca, mins, maxs] + pcs, axis=1)


def feature_matrix(network, images, banks, upto_layer=None, chunk=256) -> np.ndarray:
    """Concatenated statistic rows of conv layers 1..upto_layer for a batch."""
    from .victim import layer_outputs_batch

    banks = list(banks)
    upto = len(banks) if upto_layer is None else int(upto_layer)
    if not 1 <= upto <= len(banks):
        raise ValidationError(f"upto_layer {upto} out of range for {len(banks)} banks")
    per_layer = layer_outputs_batch(network, images, chunk=chunk)
    if len(per_layer) < upto:
        raise ValidationError(
            f"network exposes {len(per_layer)} conv layers but {upto} banks were given"
        )
    return np.concatenate(
        [stat_matrix(per_layer[m], banks[m]) for m in range(upto)], axis=1
    )


def feature_names(banks, upto_layer=None) -> list[str]:
    """Column names matching feature_matrix, channel-ordered per statistic."""
    banks = list(banks)
    upto = len(banks) if upto_layer is None else int(upto_layer)
    names = []
    for bank in banks[:upto]:
        for stat in ("pca", "min", "max", "p25", "p50", "p75"):
            names.extend(f"L{bank.layer_index}_{stat}_{ch}" for ch in range(bank.k))
    return names


def write_feature_csv(path, matrix: np.ndarray, banks, upto_layer=None):
    names = feature_names(banks, upto_layer)
    if matrix.ndim != 2 or matrix.shape[1] != len(names):
        raise ValidationError(
            f"matrix has {matrix.shape[1] if matrix.ndim == 2 else '?'} columns, "
            f"expected {len(names)}"
        )
    lines = [",".join(["image"] + names)]
    for i, row in enumerate(matrix):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in row]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class SpectralReport:
    """Per-eigenvector extremal values and std ratios for two example sets.

    Projections use a basis fitted on the normal set and are normalized by the
    normal set's per-dimension std, so the normal std column sits at 1.
    """

    eigenvalues: np.ndarray
    normal_extremal: np.ndarray
    normal_std: np.ndarray
    adversarial_extremal: np.ndarray
    adversarial_std: np.ndarray


def spectral_report(normal_matrix, adversarial_matrix, epsilon: float = 1e-8
                    ) -> SpectralReport:
    """Eigenvector-wise comparison of two feature matrices (rows = examples)."""
    xn = np.asarray(normal_matrix, dtype=np.float64)
    xa = np.asarray(adversarial_matrix, dtype=np.float64)
    if xn.ndim != 2 or xa.ndim != 2 or xn.shape[1] != xa.shape[1]:
        raise ValidationError("need two matrices with matching feature columns")
    if len(xn) == 0 or len(xa) == 0:
        raise ValidationError("both example sets must be non-empty")
    mean = xn.mean(axis=0)
    centered = xn - mean
    cov = centered.T @ centered / len(xn)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    components = _fix_signs(eigvecs[:, order])
    proj_n = centered @ components
    proj_a = (xa - mean) @ components
    stds = np.maximum(proj_n.std(axis=0), epsilon)
    return SpectralReport(
        eigenvalues=eigvals,
        normal_extremal=np.abs(proj_n).max(axis=0) / stds,
        normal_std=proj_n.std(axis=0) / stds,
        adversarial_extremal=np.abs(proj_a).max(axis=0) / stds,
        adversarial_std=proj_a.std(axis=0) / stds,
    )
