"""Multimodal embedding datasets: synthesis, CSV ingestion, splitting, disk format.

A dataset holds one embedding matrix per modality plus integer labels and
string sample ids.  On disk it is a directory with a ``manifest.json`` and
one packed float32 tensor block per modality (magic ``MMEB0001``).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    DataLengthError,
    JoinError,
    ParseError,
    ValidationError,
)
from .linalg import RngStream

TENSOR_MAGIC = b"MMEB0001"
FORMAT_VERSION = 1

# Stream-id namespaces so synthesis and splitting never share randomness.
_SYNTH_SID = 0x53594E54
_SPLIT_SID = 0x53504C54


@dataclass(frozen=True)
class ModalityInfo:
    name: str
    dim: int


@dataclass
class MultimodalDataset:
    """Labeled samples, each with one embedding vector per modality."""

    modalities: list[ModalityInfo]
    features: dict[str, np.ndarray]  # name -> (N, dim) float64
    labels: np.ndarray  # (N,) int64
    sample_ids: list[str]
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class_{c}" for c in range(self.num_classes)]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def validate(self) -> None:
        n = self.n_samples
        if self.labels.shape != (n,):
            raise ValidationError(f"labels shape {self.labels.shape} != ({n},)")
        if len(set(self.sample_ids)) != n:
            raise ValidationError("sample ids are not unique")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if len(self.class_names) != self.num_classes:
            raise ValidationError("class_names length != num_classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise ValidationError(
                f"label {bad} out of range for {self.num_classes} classes"
            )
        declared = {m.name for m in self.modalities}
        if declared != set(self.features):
            raise ValidationError(
                f"feature keys {sorted(self.features)} != declared modalities {sorted(declared)}"
            )
        for m in self.modalities:
            mat = self.features[m.name]
            if mat.shape != (n, m.dim):
                raise ValidationError(
                    f"modality '{m.name}' has shape {mat.shape}, expected ({n}, {m.dim})"
                )

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            modalities=list(self.modalities),
            features={k: v[idx].copy() for k, v in self.features.items()},
            labels=self.labels[idx].copy(),
            sample_ids=[self.sample_ids[i] for i in idx],
            num_classes=self.num_classes,
            class_names=list(self.class_names),
        )

    def equals(self, other: "MultimodalDataset") -> bool:
        return (
            self.modalities == other.modalities
            and self.sample_ids == other.sample_ids
            and self.num_classes == other.num_classes
            and self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and all(
                np.array_equal(self.features[m.name], other.features[m.name])
                for m in self.modalities
            )
        )


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    val_frac: float
    test_frac: float
    seed: int
    stratified: bool = True

    def validate(self) -> None:
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ConfigError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class SynthModality:
    """Per-modality synthesis knobs.

    ``separation`` is the std of class-mean coordinates; ``noise_scale`` the
    per-coordinate sample std around the class mean; ``ambiguous_frac`` the
    fraction of classes whose mean is collided with a confuser class in this
    modality, making the pair indistinguishable here.
    """

    name: str
    dim: int
    separation: float
    noise_scale: float
    ambiguous_frac: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    samples_per_class: int
    modalities: tuple[SynthModality, ...]
    seed: int

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        for m in self.modalities:
            if m.dim <= 0:
                raise ConfigError(f"modality '{m.name}' dim must be > 0")
            if m.noise_scale <= 0:
                raise ConfigError(f"modality '{m.name}' noise_scale must be > 0")
            if not (0.0 <= m.ambiguous_frac <= 1.0):
                raise ConfigError(f"modality '{m.name}' ambiguous_frac must be in [0, 1]")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique")


def generate_synthetic(spec: SynthSpec) -> MultimodalDataset:
    """Draw a class-mean Gaussian mixture per modality, deterministic in the seed.

    Classes marked ambiguous in a modality are paired up and each pair made
    to share one mean, so the pair cannot be told apart from that modality
    alone while untouched classes stay fully separable.  An odd leftover
    joins an existing pair as a three-way collision (or, when it is the only
    mark, collides with a random clean class).  Marks are disjoint across
    modalities: a class is degraded in at most one.
    """
    spec.validate()
    rng = RngStream(spec.seed, _SYNTH_SID)
    k = spec.num_classes
    n_per = spec.samples_per_class

    means: dict[str, np.ndarray] = {}
    already_marked: set[int] = set()
    for mi, mod in enumerate(spec.modalities):
        mu = rng.child(mi, 0).normal(k, mod.dim) * mod.separation
        n_amb = int(round(mod.ambiguous_frac * k))
        available = [c for c in range(k) if c not in already_marked]
        if n_amb > len(available):
            raise ConfigError(
                f"ambiguous_frac values overlap: modality '{mod.name}' asks for "
                f"{n_amb} classes but only {len(available)} are unmarked"
            )
        perm = rng.child(mi, 1).permutation(len(available))
        chosen = [available[p] for p in perm[:n_amb]]
        for j in range(0, len(chosen) - 1, 2):
            mu[chosen[j]] = mu[chosen[j + 1]]
        if len(chosen) % 2 == 1:
            leftover = chosen[-1]
            if len(chosen) >= 3:
                mu[leftover] = mu[chosen[-2]]
            else:
                pool = [c for c in range(k) if c != leftover and c not in already_marked]
                if not pool:
                    pool = [c for c in range(k) if c != leftover]
                partner = pool[rng.child(mi, 2).integers(0, len(pool))]
                mu[leftover] = mu[partner]
                chosen.append(partner)
        already_marked.update(chosen)
        means[mod.name] = mu

    features = {m.name: np.empty((k * n_per, m.dim)) for m in spec.modalities}
    labels = np.repeat(np.arange(k, dtype=np.int64), n_per)
    for mi, mod in enumerate(spec.modalities):
        for c in range(k):
            noise = rng.child(mi, 3, c).normal(n_per, mod.dim) * mod.noise_scale
            features[mod.name][c * n_per : (c + 1) * n_per] = means[mod.name][c] + noise

    sample_ids = [f"c{c:03d}_s{i:04d}" for c in range(k) for i in range(n_per)]
    return MultimodalDataset(
        modalities=[ModalityInfo(m.name, m.dim) for m in spec.modalities],
        features=features,
        labels=labels,
        sample_ids=sample_ids,
        num_classes=k,
    )


def split(
    ds: MultimodalDataset, spec: SplitSpec
) -> tuple[MultimodalDataset, MultimodalDataset, MultimodalDataset]:
    """Disjoint train/val/test cover of the dataset, deterministic in the seed."""
    spec.validate()
    rng = RngStream(spec.seed, _SPLIT_SID)
    buckets: list[list[int]] = [[], [], []]

    def allocate(indices: np.ndarray, perm: np.ndarray) -> None:
        n = len(indices)
        b1 = round(spec.train_frac * n)
        b2 = round((spec.train_frac + spec.val_frac) * n)
        shuffled = indices[perm]
        buckets[0].extend(shuffled[:b1])
        buckets[1].extend(shuffled[b1:b2])
        buckets[2].extend(shuffled[b2:])

    if spec.stratified:
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            if len(idx) < 3:
                raise ConfigError(
                    f"stratified split needs >=3 samples per class; class {c} has {len(idx)}"
                )
            allocate(idx, rng.child(c).permutation(len(idx)))
    else:
        idx = np.arange(ds.n_samples)
        allocate(idx, rng.permutation(len(idx)))

    return tuple(ds.subset(sorted(b)) for b in buckets)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Disk format: manifest.json + one packed tensor block per modality.


def _write_tensor_block(path: Path, mat: np.ndarray) -> None:
    count, dim = mat.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", count, dim))
        f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def _read_tensor_block(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DataLengthError(f"{path}: tensor block shorter than its 16-byte header")
    if blob[:8] != TENSOR_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic {blob[:8]!r}, expected {TENSOR_MAGIC!r}"
        )
    count, dim = struct.unpack("<II", blob[8:16])
    expected = 16 + count * dim * 4
    if len(blob) != expected:
        raise DataLengthError(
            f"{path}: {len(blob)} bytes on disk, header ({count}x{dim}) needs {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    return data.reshape(count, dim).astype(np.float64)


def save_dataset(ds: MultimodalDataset, path) -> None:
    """Write a dataset directory (features quantized to float32)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_classes": ds.num_classes,
        "class_names": ds.class_names,
        "modalities": [
            {"name": m.name, "dim": m.dim, "file": f"{m.name}.bin"} for m in ds.modalities
        ],
        "samples": [
            {"id": sid, "label": int(lbl)} for sid, lbl in zip(ds.sample_ids, ds.labels)
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for m in ds.modalities:
        _write_tensor_block(root / f"{m.name}.bin", ds.features[m.name])


def load_dataset(path) -> MultimodalDataset:
    """Read a dataset directory, validating every invariant before returning."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{root}: unsupported format_version {manifest.get('format_version')!r}"
        )
    samples = manifest["samples"]
    modalities = [ModalityInfo(m["name"], int(m["dim"])) for m in manifest["modalities"]]
    features = {}
    for m, entry in zip(modalities, manifest["modalities"]):
        mat = _read_tensor_block(root / entry["file"])
        if mat.shape[0] != len(samples):
            raise DataLengthError(
                f"{entry['file']}: {mat.shape[0]} rows for {len(samples)} manifest samples"
            )
        if mat.shape[1] != m.dim:
            raise DataLengthError(
                f"{entry['file']}: tensor block dim {mat.shape[1]} != manifest dim {m.dim}"
            )
        features[m.name] = mat
    return MultimodalDataset(
        modalities=modalities,
        features=features,
        labels=np.array([s["label"] for s in samples], dtype=np.int64),
        sample_ids=[s["id"] for s in samples],
        num_classes=int(manifest["num_classes"]),
        class_names=list(manifest["class_names"]),
    )


# ---------------------------------------------------------------------------
# CSV ingestion: one file per modality plus a labels file, joined on sample_id.


def _read_feature_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise DataFormatError(f"{path}: first column must be 'sample_id'")
        width = len(header) - 1
        if width < 1:
            raise DataFormatError(f"{path}: no feature columns")
        ids, rows = [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise ParseError(f"{path}: row {rownum} has {len(row)} cells, expected {width + 1}")
            ids.append(row[0])
            vals = []
            for colnum, cell in enumerate(row[1:], start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {rownum}, column {colnum}: {cell!r}"
                    ) from None
            rows.append(vals)
    if len(set(ids)) != len(ids):
        raise JoinError(f"{path}: duplicate sample ids")
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(ids), width)


def import_csv(
    modality_csvs: dict[str, str],
    labels_csv: str,
    num_classes: int | None = None,
) -> MultimodalDataset:
    """Join per-modality feature CSVs with a labels CSV on sample_id.

    Modality dims are inferred from column counts, sample order follows the
    labels file.  When ``num_classes`` is given, labels are validated against
    it; otherwise it is inferred as ``max(label) + 1``.
    """
    with open(labels_csv, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["sample_id", "label"]:
            raise DataFormatError(f"{labels_csv}: header must be 'sample_id,label'")
        ids, labels = [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError(f"{labels_csv}: row {rownum} has {len(row)} cells, expected 2")
            ids.append(row[0])
            try:
                labels.append(int(row[1]))
            except ValueError:
                raise ParseError(
                    f"{labels_csv}: non-integer label at row {rownum}: {row[1]!r}"
                ) from None
    if len(set(ids)) != len(ids):
        raise JoinError(f"{labels_csv}: duplicate sample ids")

    modalities, features = [], {}
    for name, path in modality_csvs.items():
        mod_ids, mat = _read_feature_csv(path)
        index = {sid: i for i, sid in enumerate(mod_ids)}
        missing = [sid for sid in ids if sid not in index]
        extra = [sid for sid in mod_ids if sid not in set(ids)]
        if missing or extra:
            parts = []
            if missing:
                parts.append(f"missing {missing[:5]}")
            if extra:
                parts.append(f"unexpected {extra[:5]}")
            raise JoinError(f"modality '{name}': sample ids do not join: " + "; ".join(parts))
        order = [index[sid] for sid in ids]
        features[name] = mat[order]
        modalities.append(ModalityInfo(name, mat.shape[1]))

    labels_arr = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels_arr.max()) + 1 if len(labels_arr) else 1
    return MultimodalDataset(
        modalities=modalities,
        features=features,
        labels=labels_arr,
        sample_ids=ids,
        num_classes=k,
    )
