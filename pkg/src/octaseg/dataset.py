"""Dataset IO: on-disk layout, float-map container, deterministic splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SynthSpec
from .errors import DataLoadError
from .synth import SampleRecord, boundary_from_mask, sdf_from_mask, synthesize_dataset

SPLIT_FRACTIONS = (0.6, 0.1, 0.3)  # train, val, test


@dataclass
class DatasetSplit:
    train: list[SampleRecord] = field(default_factory=list)
    val: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def split_ids(ids: list[str], split_seed: int) -> tuple[list[str], list[str], list[str]]:
    """Shuffle the sorted id list with a dedicated seed, then cut 60/10/30:
    floor for train and val, remainder to test."""
    ordered = sorted(ids)
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_train = int(np.floor(SPLIT_FRACTIONS[0] * n))
    n_val = int(np.floor(SPLIT_FRACTIONS[1] * n))
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def split_samples(samples: list[SampleRecord], split_seed: int) -> DatasetSplit:
    """Partition loaded samples into train/val/test by their ids."""
    by_id = {s.id: s for s in samples}
    if len(by_id) != len(samples):
        raise DataLoadError("duplicate sample ids in dataset")
    train, val, test = split_ids(list(by_id), split_seed)
    return DatasetSplit([by_id[i] for i in train],
                        [by_id[i] for i in val],
                        [by_id[i] for i in test])


def _read_gray(path: Path, sample_id: str, kind: str) -> np.ndarray:
    if not path.is_file():
        raise DataLoadError(f"sample {sample_id!r}: missing {kind} file {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DataLoadError(f"sample {sample_id!r}: unreadable {kind} file {path}: {exc}")
    return arr


def load_sample(root: Path, sample_id: str, boundary_method: str = "morph") -> SampleRecord:
    image = _read_gray(root / "images" / f"{sample_id}.png", sample_id, "image")
    region = _read_gray(root / "region" / f"{sample_id}.png", sample_id, "region mask")
    vessel = _read_gray(root / "vessel" / f"{sample_id}.png", sample_id, "vessel mask")
    for name, m in (("region", region), ("vessel", vessel)):
        if m.shape != image.shape:
            raise DataLoadError(
                f"sample {sample_id!r}: {name} mask shape {m.shape} "
                f"does not match image shape {image.shape}")
    region_u8 = (region > 0.5).astype(np.uint8)
    vessel_u8 = ((vessel > 0.5).astype(np.uint8)) & region_u8
    return SampleRecord(
        image=image.astype(np.float32),
        region_mask=region_u8,
        vessel_mask=vessel_u8,
        boundary_map=boundary_from_mask(region_u8, boundary_method),
        shape_map=sdf_from_mask(region_u8),
        id=sample_id,
    )


def load_dataset(root: str | Path, split_seed: int = 0,
                 boundary_method: str = "morph") -> DatasetSplit:
    """Load every sample under ``root`` and split it 60/10/30."""
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DataLoadError(f"dataset root {root} has no images/ directory")
    ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not ids:
        raise DataLoadError(f"no .png images found under {images_dir}")
    tr, va, te = split_ids(ids, split_seed)
    return DatasetSplit(
        train=[load_sample(root, i, boundary_method) for i in tr],
        val=[load_sample(root, i, boundary_method) for i in va],
        test=[load_sample(root, i, boundary_method) for i in te],
    )


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)


def write_dataset(samples: list[SampleRecord], root: str | Path) -> None:
    """Materialize samples into the images/ region/ vessel/ layout."""
    root = Path(root)
    for s in samples:
        _write_png(root / "images" / f"{s.id}.png", s.image)
        _write_png(root / "region" / f"{s.id}.png", s.region_mask * 255)
        _write_png(root / "vessel" / f"{s.id}.png", s.vessel_mask * 255)


def materialize_synthetic(root: str | Path, count: int, base_seed: int,
                          spec: SynthSpec) -> list[str]:
    samples = synthesize_dataset(count, base_seed, spec)
    write_dataset(samples, root)
    return [s.id for s in samples]


def write_float_map(path: str | Path, arr: np.ndarray) -> None:
    """Raw little-endian float32 dump plus a JSON sidecar with the shape."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    path.write_bytes(a.tobytes())
    sidecar = {"shape": list(a.shape), "dtype": "<f4"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_float_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise DataLoadError(f"float map {path} or its sidecar is missing")
    meta = json.loads(sidecar_path.read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=meta["dtype"])
    return arr.reshape(meta["shape"]).copy()
