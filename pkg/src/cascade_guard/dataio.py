"""Dataset ingestion, the bundled synthetic task and artifact persistence.

All persisted artifacts are deterministic: sorted JSON keys, repr floats and
base64-encoded little-endian float64 arrays, so identical inputs always
produce identical bytes and every float round-trips bit-exactly.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tensor import Tensor

ARTIFACT_VERSION = "cascade-guard/1"

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

SPLIT_TAGS = ("train", "val", "test")

__all__ = [
    "ARTIFACT_VERSION",
    "Dataset",
    "synth_dataset",
    "load_idx",
    "save_dataset",
    "load_dataset",
    "save_tensor",
    "load_tensor",
    "save_network",
    "load_network",
    "save_detector",
    "load_detector",
    "save_adversarial_batch",
    "load_adversarial_batch",
    "dataset_fingerprint",
]


# ---------------------------------------------------------------------------
# Dataset container and the synthetic 10-class task.
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Images in [0,1] with labels, per-image split tags and provenance."""

    images: np.ndarray
    labels: np.ndarray
    split_tags: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split_tags = np.asarray(self.split_tags)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N x H x W x C, got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.split_tags.shape != (n,):
            raise ValidationError("images, labels and split tags must align")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("image values must lie in [0, 1]")
        bad = set(self.split_tags.tolist()) - set(SPLIT_TAGS)
        if bad:
            raise ValidationError(f"unknown split tags {sorted(bad)}")
        classes = int(self.manifest.get("classes", self.labels.max() + 1 if n else 1))
        if n and int(self.labels.max()) >= classes:
            raise ValidationError("labels exceed the class count")
        if n and int(self.labels.min()) < 0:
            raise ValidationError("labels must be non-negative")
        self.manifest = dict(self.manifest)
        self.manifest["classes"] = classes

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> int:
        return int(self.manifest["classes"])

    @property
    def image_dims(self) -> tuple:
        return self.images.shape[1:]

    def indices(self, tag: str) -> np.ndarray:
        if tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {tag!r}")
        return np.nonzero(self.split_tags == tag)[0]

    def split(self, tag: str):
        idx = self.indices(tag)
        return self.images[idx], self.labels[idx]

    def tensor(self, i: int) -> Tensor:
        return Tensor(self.images[int(i)])


_GRID_Y, _GRID_X = np.mgrid[0:28, 0:28].astype(np.float64)


def _shape_mask(cls: int, rng: np.random.Generator) -> np.ndarray:
    """One of ten parameterized shapes on a 28x28 canvas."""
    yy, xx = _GRID_Y, _GRID_X
    cy = rng.uniform(11.0, 17.0)
    cx = rng.uniform(11.0, 17.0)
    dy = yy - cy
    dx = xx - cx
    if cls == 0:  # horizontal bar
        t = rng.uniform(1.3, 2.3)
        return (np.abs(yy - rng.uniform(8.0, 20.0)) <= t).astype(np.float64)
    if cls == 1:  # vertical bar
        t = rng.uniform(1.3, 2.3)
        return (np.abs(xx - rng.uniform(8.0, 20.0)) <= t).astype(np.float64)
    if cls == 2:  # main-diagonal stroke
        off = rng.uniform(-5.0, 5.0)
        t = rng.uniform(1.8, 2.8)
        return (np.abs(xx - yy - off) <= t).astype(np.float64)
    if cls == 3:  # anti-diagonal stroke
        off = rng.uniform(22.0, 32.0)
        t = rng.uniform(1.8, 2.8)
        return (np.abs(xx + yy - off) <= t).astype(np.float64)
    if cls == 4:  # filled disk
        r = rng.uniform(5.0, 8.0)
        return (dx * dx + dy * dy <= r * r).astype(np.float64)
    if cls == 5:  # ring
        r = rng.uniform(6.5, 9.0)
        d = np.sqrt(dx * dx + dy * dy)
        return (np.abs(d - r) <= 1.6).astype(np.float64)
    if cls == 6:  # plus cross
        arm = rng.uniform(7.0, 10.0)
        t = rng.uniform(1.3, 2.0)
        horiz = (np.abs(dy) <= t) & (np.abs(dx) <= arm)
        vert = (np.abs(dx) <= t) & (np.abs(dy) <= arm)
        return (horiz | vert).astype(np.float64)
    if cls == 7:  # X cross
        arm = rng.uniform(7.0, 10.0)
        t = rng.uniform(1.8, 2.6)
        box = np.maximum(np.abs(dx), np.abs(dy)) <= arm
        diag = (np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t)
        return (box & diag).astype(np.float64)
    if cls == 8:  # square outline
        s = rng.uniform(6.5, 9.0)
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return ((cheb <= s) & (cheb > s - 2.5)).astype(np.float64)
    if cls == 9:  # filled square
        s = rng.uniform(5.0, 8.0)
        return (np.maximum(np.abs(dx), np.abs(dy)) <= s).astype(np.float64)
    raise ValidationError(f"no shape for class {cls}")


def synth_dataset(seed: int, n_per_class: int, noise_sigma: float = 0.05,
                  fractions=(0.7, 0.15, 0.15)) -> Dataset:
    """Procedural 28x28 grayscale 10-class shapes task, balanced and seeded.

    Shapes vary in position and scale; pixel noise is Gaussian with the given
    sigma, clipped back to [0,1]. Split tags are assigned stratified per class
    by the given train/val/test fractions.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be positive")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError("fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    classes = 10
    images = np.empty((classes * n_per_class, 28, 28, 1))
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    tags = np.empty(classes * n_per_class, dtype="<U5")
    n_train = int(round(fractions[0] * n_per_class))
    n_val = int(round(fractions[1] * n_per_class))
    n_train = min(n_train, n_per_class)
    n_val = min(n_val, n_per_class - n_train)
    row = 0
    for cls in range(classes):
        for i in range(n_per_class):
            mask = _shape_mask(cls, rng)
            # Low contrast keeps class boundaries near each other, so small
            # perturbations genuinely flip the trained victim. The weak
            # blockwise background texture gives every filter direction real
            # variance on normal data, as natural images would.
            field = rng.uniform(0.0, 1.0, (7, 7))
            background = rng.uniform(0.02, 0.06) * np.repeat(np.repeat(field, 4, 0), 4, 1)
            img = rng.uniform(0.11, 0.20) * mask + background
            img += rng.normal(0.0, noise_sigma, (28, 28))
            images[row, :, :, 0] = np.clip(img, 0.0, 1.0)
            labels[row] = cls
            tags[row] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            row += 1
    order = rng.permutation(row)
    manifest = {
        "generator": "synthetic-shapes",
        "seed": int(seed),
        "n_per_class": int(n_per_class),
        "noise_sigma": float(noise_sigma),
        "classes": classes,
    }
    return Dataset(images[order], labels[order], tags[order], manifest)


# ---------------------------------------------------------------------------
# IDX binary format.
# ---------------------------------------------------------------------------

def _read_exact(f, count: int, path) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"truncated IDX file {path}")
    return data


def _read_u32(f, path) -> int:
    return struct.unpack(">I", _read_exact(f, 4, path))[0]


def load_idx(images_path, labels_path, classes=None, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair into a Dataset.

    Big-endian magic 0x00000803 / 0x00000801, big-endian dimension sizes,
    unsigned-byte pixels scaled by 1/255.
    """
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_u32(f, images_path)
        if magic != _IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad magic 0x{magic:08x} in {images_path} "
                f"(expected image magic 0x{_IDX_IMAGES_MAGIC:08x})"
            )
        n = _read_u32(f, images_path)
        h = _read_u32(f, images_path)
        w = _read_u32(f, images_path)
        pixels = _read_exact(f, n * h * w, images_path)
    with open(labels_path, "rb") as f:
        magic = _read_u32(f, labels_path)
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad magic 0x{magic:08x} in {labels_path} "
                f"(expected label magic 0x{_IDX_LABELS_MAGIC:08x})"
            )
        n_labels = _read_u32(f, labels_path)
        if n_labels != n:
            raise FormatError(
                f"count mismatch: {n} images in {images_path} "
                f"but {n_labels} labels in {labels_path}"
            )
        raw_labels = _read_exact(f, n_labels, labels_path)
    images = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64)
    images = images.reshape(n, h, w, 1) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    manifest = {"source": str(images_path)}
    if classes is not None:
        manifest["classes"] = int(classes)
    return Dataset(images, labels, np.full(n, split, dtype="<U5"), manifest)


def _write_idx_images(path, images: np.ndarray):
    n, h, w, c = images.shape
    if c != 1:
        raise ValidationError("IDX export supports single-channel images only")
    pixels = np.round(images[:, :, :, 0] * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())


def _write_idx_labels(path, labels: np.ndarray):
    if labels.size and labels.max() > 255:
        raise ValidationError("IDX labels must fit in a byte")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def save_dataset(dataset: Dataset, dir_path):
    """Write images.idx + labels.idx + manifest.json into a directory.

    Pixels are quantized to bytes; a second save of the loaded dataset is
    byte-identical to the first.
    """
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    _write_idx_images(d / "images.idx", dataset.images)
    _write_idx_labels(d / "labels.idx", dataset.labels)
    payload = {
        "version": ARTIFACT_VERSION,
        "splits": {tag: dataset.indices(tag).tolist() for tag in SPLIT_TAGS},
        "provenance": _json_safe(dataset.manifest),
    }
    _dump_json(d / "manifest.json", payload)


def load_dataset(dir_path) -> Dataset:
    d = Path(dir_path)
    payload = _load_json(d / "manifest.json")
    _check_version(payload, d / "manifest.json")
    splits = _require(payload, "splits", d / "manifest.json")
    base = load_idx(d / "images.idx", d / "labels.idx")
    tags = np.full(base.n, "train", dtype="<U5")
    for tag in SPLIT_TAGS:
        idx = np.asarray(splits.get(tag, []), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= base.n):
            raise FormatError(f"split indices out of range in {d / 'manifest.json'}")
        tags[idx] = tag
    manifest = dict(payload.get("provenance", {}))
    return Dataset(base.images, base.labels, tags, manifest)


def dataset_fingerprint(dataset: Dataset) -> str:
    """Stable sha256 over quantized pixels and labels."""
    h = hashlib.sha256()
    h.update(np.round(dataset.images * 255.0).astype(np.uint8).tobytes())
    h.update(dataset.labels.astype(np.int64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# JSON artifact plumbing.
# ---------------------------------------------------------------------------

def _f64_to_b64(arr) -> str:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return base64.b64encode(data).decode("ascii")


def _b64_to_f64(text, shape, what) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise FormatError(f"corrupt base64 payload in {what}: {exc}") from None
    arr = np.frombuffer(raw, dtype="<f8")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise FormatError(f"payload in {what} has {arr.size} values, expected {expected}")
    return arr.reshape(shape).astype(np.float64)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def _dump_json(path, payload):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing artifact {path}")
    try:
        payload = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt JSON artifact {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise FormatError(f"artifact {path} is not a JSON object")
    return payload


def _require(payload: dict, key: str, path):
    if key not in payload:
        raise FormatError(f"artifact {path} is missing key {key!r}")
    return payload[key]


def _check_version(payload: dict, path):
    version = payload.get("version")
    if version != ARTIFACT_VERSION:
        raise FormatError(
            f"unsupported artifact version {version!r} in {path} "
            f"(expected {ARTIFACT_VERSION!r})"
        )


# ---------------------------------------------------------------------------
# Tensor files.
# ---------------------------------------------------------------------------

def save_tensor(path, tensor: Tensor):
    payload = {
        "version": ARTIFACT_VERSION,
        "dims": list(tensor.dims),
        "data": _f64_to_b64(tensor.array),
    }
    _dump_json(path, payload)


def load_tensor(path) -> Tensor:
    payload = _load_json(path)
    _check_version(payload, path)
    dims = _require(payload, "dims", path)
    arr = _b64_to_f64(_require(payload, "data", path), tuple(dims), path)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Network artifact.
# ---------------------------------------------------------------------------

def _layer_to_json(layer):
    from .autograd import ConvLayer, DenseLayer, MaxPoolLayer, ReluLayer, SoftmaxLayer

    if isinstance(layer, ConvLayer):
        return {"kind": "conv", "filters": layer.filters, "kernel": layer.kernel,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, ReluLayer):
        return {"kind": "relu"}
    if isinstance(layer, MaxPoolLayer):
        return {"kind": "maxpool", "window": layer.window, "stride": layer.stride}
    if isinstance(layer, DenseLayer):
        return {"kind": "dense", "units": layer.units}
    if isinstance(layer, SoftmaxLayer):
        return {"kind": "softmax"}
    raise ValidationError(f"unknown layer {layer!r}")


def layer_from_json(entry: dict, path="<spec>"):
    from .autograd import ConvLayer, DenseLayer, MaxPoolLayer, ReluLayer, SoftmaxLayer

    kind = entry.get("kind")
    try:
        if kind == "conv":
            return ConvLayer(int(entry["filters"]), int(entry["kernel"]),
                             int(entry.get("stride", 1)), int(entry.get("padding", 0)))
        if kind == "relu":
            return ReluLayer()
        if kind == "maxpool":
            return MaxPoolLayer(int(entry["window"]), int(entry["stride"]))
        if kind == "dense":
            return DenseLayer(int(entry["units"]))
        if kind == "softmax":
            return SoftmaxLayer()
    except KeyError as exc:
        raise FormatError(f"layer entry in {path} is missing {exc}") from None
    raise FormatError(f"unknown layer kind {kind!r} in {path}")


def spec_from_json(payload: dict, path="<spec>"):
    from .victim import NetworkSpec

    layers = tuple(layer_from_json(e, path) for e in _require(payload, "layers", path))
    return NetworkSpec(
        input_dims=tuple(_require(payload, "input_dims", path)),
        classes=int(_require(payload, "classes", path)),
        layers=layers,
    )


def spec_to_json(spec) -> dict:
    return {
        "input_dims": list(spec.input_dims),
        "classes": spec.classes,
        "layers": [_layer_to_json(l) for l in spec.layers],
    }


def save_network(path, network):
    from .tensor import ConvFilterBank

    entries = []
    for idx, entry in enumerate(network.weights):
        if entry is None:
            continue
        if isinstance(entry, ConvFilterBank):
            entries.append({
                "layer": idx, "kind": "conv",
                "shape": list(entry.weights.shape),
                "weights": _f64_to_b64(entry.weights),
                "biases": _f64_to_b64(entry.biases),
            })
        else:
            w, b = entry
            entries.append({
                "layer": idx, "kind": "dense",
                "shape": list(w.shape),
                "weights": _f64_to_b64(w),
                "biases": _f64_to_b64(b),
            })
    payload = {
        "version": ARTIFACT_VERSION,
        "spec": spec_to_json(network.spec),
        "weights": entries,
        "metadata": _json_safe(network.metadata),
    }
    _dump_json(path, payload)


def load_network(path):
    from .victim import Network

    payload = _load_json(path)
    _check_version(payload, path)
    spec = spec_from_json(_require(payload, "spec", path), path)
    by_layer = {}
    for entry in _require(payload, "weights", path):
        idx = int(_require(entry, "layer", path))
        shape = tuple(_require(entry, "shape", path))
        w = _b64_to_f64(_require(entry, "weights", path), shape, path)
        b = _b64_to_f64(_require(entry, "biases", path), (shape[0],), path)
        by_layer[idx] = (w, b)
    weights = [by_layer.get(i) for i in range(len(spec.layers))]
    return Network(spec, weights, metadata=payload.get("metadata", {}))


# ---------------------------------------------------------------------------
# Detector artifact.
# ---------------------------------------------------------------------------

def save_detector(path, model):
    stages = []
    rates = []
    for stage in model.stages:
        svm = stage.svm
        stages.append({
            "layer": stage.layer_index,
            "w": _f64_to_b64(svm.weights),
            "b": float(svm.bias),
            "tau": float(stage.tau),
            "feature_means": _f64_to_b64(svm.feature_means),
            "feature_stds": _f64_to_b64(svm.feature_stds),
        })
        rates.append(None if stage.fpr is None else [float(stage.fpr), float(stage.tpr)])
    banks = []
    for bank in model.banks:
        banks.append({
            "layer": bank.layer_index,
            "e": _f64_to_b64(bank.mean),
            "W": _f64_to_b64(bank.components),
            "s": _f64_to_b64(bank.stds),
        })
    metadata = dict(model.metadata)
    metadata["stage_rates"] = rates
    metadata["bank_epsilons"] = [float(b.epsilon) for b in model.banks]
    payload = {
        "version": ARTIFACT_VERSION,
        "target_tpr": float(model.target_tpr),
        "stages": stages,
        "pca_banks": banks,
        "metadata": _json_safe(metadata),
    }
    _dump_json(path, payload)


def load_detector(path):
    from .cascade import CascadeModel, CascadeStage, LinearSvm
    from .featstats import PcaBank

    payload = _load_json(path)
    _check_version(payload, path)
    metadata = dict(payload.get("metadata", {}))
    rates = metadata.pop("stage_rates", None)
    epsilons = metadata.pop("bank_epsilons", None)
    svm_c = float(metadata.get("svm_c", 0.005))
    seed = int(metadata.get("seed", 0))
    banks = []
    for i, entry in enumerate(_require(payload, "pca_banks", path)):
        e_raw = _require(entry, "e", path)
        raw = base64.b64decode(e_raw.encode("ascii"))
        k = len(raw) // 8
        banks.append(PcaBank(
            layer_index=int(_require(entry, "layer", path)),
            mean=_b64_to_f64(e_raw, (k,), path),
            components=_b64_to_f64(_require(entry, "W", path), (k, k), path),
            stds=_b64_to_f64(_require(entry, "s", path), (k,), path),
            epsilon=float(epsilons[i]) if epsilons else 1e-8,
        ))
    stages = []
    for i, entry in enumerate(_require(payload, "stages", path)):
        w_raw = _require(entry, "w", path)
        dim = len(base64.b64decode(w_raw.encode("ascii"))) // 8
        svm = LinearSvm(
            weights=_b64_to_f64(w_raw, (dim,), path),
            bias=float(_require(entry, "b", path)),
            c=svm_c,
            seed=seed,
            feature_means=_b64_to_f64(_require(entry, "feature_means", path), (dim,), path),
            feature_stds=_b64_to_f64(_require(entry, "feature_stds", path), (dim,), path),
        )
        fpr, tpr = (None, None)
        if rates and rates[i] is not None:
            fpr, tpr = float(rates[i][0]), float(rates[i][1])
        stages.append(CascadeStage(
            layer_index=int(_require(entry, "layer", path)),
            svm=svm,
            tau=float(_require(entry, "tau", path)),
            fpr=fpr,
            tpr=tpr,
        ))
    return CascadeModel(
        stages=tuple(stages),
        banks=tuple(banks),
        target_tpr=float(_require(payload, "target_tpr", path)),
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# Adversarial batches: a directory of tensor files plus a manifest.
# ---------------------------------------------------------------------------

def save_adversarial_batch(dir_path, records, attack_meta=None):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        name = f"img_{i:05d}.json"
        save_tensor(d / name, rec.image)
        entries.append({
            "file": name,
            "source_image_id": rec.source_image_id,
            "original_label": rec.original_label,
            "target_label": rec.target_label,
            "kind": rec.kind,
            "achieved_confidence": float(rec.achieved_confidence),
            "l1": None if rec.l1 is None else float(rec.l1),
            "linf": None if rec.linf is None else float(rec.linf),
            "iterations": int(rec.iterations),
            "success": bool(rec.success),
        })
    payload = {
        "version": ARTIFACT_VERSION,
        "attack": _json_safe(attack_meta or {}),
        "records": entries,
    }
    _dump_json(d / "manifest.json", payload)


def load_adversarial_batch(dir_path):
    from .attacks import AdversarialRecord

    d = Path(dir_path)
    payload = _load_json(d / "manifest.json")
    _check_version(payload, d / "manifest.json")
    records = []
    for entry in _require(payload, "records", d / "manifest.json"):
        image = load_tensor(d / _require(entry, "file", d / "manifest.json"))
        src = entry.get("source_image_id")
        orig = entry.get("original_label")
        records.append(AdversarialRecord(
            source_image_id=None if src is None else int(src),
            image=image,
            original_label=None if orig is None else int(orig),
            target_label=int(_require(entry, "target_label", d)),
            kind=str(_require(entry, "kind", d)),
            achieved_confidence=float(_require(entry, "achieved_confidence", d)),
            l1=None if entry.get("l1") is None else float(entry["l1"]),
            linf=None if entry.get("linf") is None else float(entry["linf"]),
            iterations=int(_require(entry, "iterations", d)),
            success=bool(_require(entry, "success", d)),
        ))
    return records
