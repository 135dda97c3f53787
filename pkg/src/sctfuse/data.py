"""Paired-volume ingestion and the normalization/slicing protocol.

CT and CBCT are clipped to [-1024, 2000] HU and mapped affinely onto
[-1, 1]; MRI is scaled by its per-volume 99th percentile (nearest rank),
clipped above it, and mapped onto the same interval. Volumes are sliced
axially, resized to the network size, and predictions are resized back,
inverted to HU, and clipped for evaluation.

Everything here runs in float64; casting to float32 happens only at the
network boundary, which keeps the HU round trip well below 1e-4.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DegenerateInputError, VolumeIOError
from .nifti import read_nifti, write_nifti

MODALITIES = ("CT", "CBCT", "MRI")

CT_CLIP_LO = -1024.0
CT_CLIP_HI = 2000.0
CT_CENTER = (CT_CLIP_LO + CT_CLIP_HI) / 2.0  # 488
CT_HALF_SPAN = (CT_CLIP_HI - CT_CLIP_LO) / 2.0  # 1512
HU_RANGE = CT_CLIP_HI - CT_CLIP_LO  # 3024


@dataclass
class Volume:
    """One 3D scan, indexed [z, y, x], intensities in acquisition units."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: str = "CT"
    case_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ContractError(f"voxels must be [D,H,W], got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ContractError(f"volume {self.case_id!r} contains non-finite voxels")
        if any(s <= 0 for s in self.spacing):
            raise ContractError(f"spacing must be positive, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class NormalizedVolume:
    """Volume mapped into [-1, 1] plus the record needed to invert it."""

    voxels: np.ndarray
    norm_record: dict
    source: Volume

    def __post_init__(self):
        lo, hi = self.voxels.min(), self.voxels.max()
        if lo < -1.0 or hi > 1.0:
            raise ContractError(f"normalized values outside [-1,1]: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


def percentile_nearest_rank(values: np.ndarray, q: float) -> float:
    """Smallest value with at least q percent of the data at or below it."""
    if not 0 < q <= 100:
        raise ConfigError(f"percentile must be in (0, 100], got {q}")
    flat = np.sort(np.asarray(values, dtype=np.float64), axis=None)
    rank = max(1, math.ceil(q / 100.0 * flat.size))
    return float(flat[rank - 1])


def normalize_ct(v: Volume) -> NormalizedVolume:
    """Clip to [-1024, 2000] HU, then map affinely onto [-1, 1]."""
    if v.modality not in ("CT", "CBCT"):
        raise ContractError(f"normalize_ct expects CT/CBCT, got {v.modality}")
    clipped = np.clip(v.voxels, CT_CLIP_LO, CT_CLIP_HI)
    return NormalizedVolume(
        voxels=(clipped - CT_CENTER) / CT_HALF_SPAN,
        norm_record={"kind": "ct", "clip_lo": CT_CLIP_LO, "clip_hi": CT_CLIP_HI},
        source=v,
    )


def normalize_mri(v: Volume) -> NormalizedVolume:
    """Scale by the per-volume 99th percentile, clip above it, map to [-1, 1]."""
    if v.modality != "MRI":
        raise ContractError(f"normalize_mri expects MRI, got {v.modality}")
    if v.voxels.min() < 0:
        raise ContractError(f"MRI volume {v.case_id!r} has negative intensities")
    p99 = percentile_nearest_rank(v.voxels, 99.0)
    if p99 <= 0:
        raise DegenerateInputError(f"volume {v.case_id!r}: 99th percentile is {p99}")
    unit = np.clip(v.voxels / p99, 0.0, 1.0)
    return NormalizedVolume(
        voxels=unit * 2.0 - 1.0, norm_record={"kind": "mri", "p99": p99}, source=v
    )


def normalize_volume(v: Volume) -> NormalizedVolume:
    if v.modality == "MRI":
        return normalize_mri(v)
    return normalize_ct(v)


def denormalize_to_hu(x: np.ndarray) -> np.ndarray:
    """Invert the CT map and clip to the HU window."""
    return np.clip(x * CT_HALF_SPAN + CT_CENTER, CT_CLIP_LO, CT_CLIP_HI)


@dataclass
class SliceStack:
    """Axial slices of one normalized volume at network resolution.

    `data` is [D,1,S,S] float64; `orig_hw` records the pre-resize shape
    so predictions can be mapped back.
    """

    data: torch.Tensor
    orig_hw: tuple[int, int]
    size: int

    @property
    def resized(self) -> bool:
        return self.orig_hw != (self.size, self.size)

    def __len__(self) -> int:
        return self.data.shape[0]


def extract_slices(nv: NormalizedVolume, size: int = 256) -> SliceStack:
    """One slice per axial index, bilinearly resized to size x size."""
    if size % 16 != 0:
        raise ConfigError(f"slice size {size} must be divisible by 16")
    t = torch.from_numpy(np.ascontiguousarray(nv.voxels)).unsqueeze(1)
    h, w = t.shape[-2:]
    if (h, w) != (size, size):
        # corner-aligned, so affine images survive the resize round trip
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)
    return SliceStack(data=t, orig_hw=(h, w), size=size)


def reassemble(pred_slices: torch.Tensor, reference: Volume) -> Volume:
    """Stack predicted slices back into an HU volume on the reference grid.

    Accepts [D,1,S,S] or [D,S,S]; slices are resized to the reference
    in-plane shape, denormalized to HU, and clipped.
    """
    t = torch.as_tensor(pred_slices).detach().to(torch.float64)
    if t.ndim == 3:
        t = t.unsqueeze(1)
    if t.ndim != 4 or t.shape[1] != 1:
        raise ContractError(f"expected [D,1,S,S] predictions, got {tuple(t.shape)}")
    d, h, w = reference.shape
    if t.shape[0] != d:
        raise ContractError(f"{t.shape[0]} slices for a {d}-slice reference")
    if tuple(t.shape[-2:]) != (h, w):
        t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)
    hu = denormalize_to_hu(t.squeeze(1).numpy())
    return Volume(
        voxels=hu,
        spacing=reference.spacing,
        origin=reference.origin,
        modality="CT",
        case_id=reference.case_id,
    )


def split_dataset(
    case_ids: list[str], ratios: tuple[int, int, int] = (7, 1, 2), seed: int = 0
) -> tuple[list[str], list[str], list[str]]:
    """Deterministic case-level split; sizes round(n*r/sum) with remainder to test."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate case ids in split input")
    n = len(ids)
    if n < 10:
        warnings.warn(f"only {n} cases; putting all in train", stacklevel=2)
        return sorted(ids), [], []
    total = sum(ratios)
    n_train = round(n * ratios[0] / total)
    n_val = round(n * ratios[1] / total)
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    train = sorted(order[:n_train])
    val = sorted(order[n_train : n_train + n_val])
    test = sorted(order[n_train + n_val :])
    return train, val, test


@dataclass
class PairedCase:
    case_id: str
    source: NormalizedVolume
    target: NormalizedVolume
    source_slices: SliceStack
    target_slices: SliceStack


@dataclass
class PairedDataset:
    """Flat slice-level view over normalized source/target volume pairs."""

    cases: list[PairedCase]
    split: str
    size: int
    index: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.index:
            self.index = [
                (ci, z) for ci, case in enumerate(self.cases) for z in range(len(case.source_slices))
            ]

    @classmethod
    def from_volume_pairs(
        cls, pairs: list[tuple[Volume, Volume]], split: str = "train", size: int = 256
    ) -> "PairedDataset":
        cases = []
        for source, target in pairs:
            if source.shape != target.shape:
                raise ContractError(
                    f"case {source.case_id!r}: source {source.shape} vs target {target.shape}"
                )
            if target.modality not in ("CT",):
                raise ContractError(f"target modality must be CT, got {target.modality}")
            ns, nt = normalize_volume(source), normalize_volume(target)
            cases.append(
                PairedCase(
                    case_id=source.case_id,
                    source=ns,
                    target=nt,
                    source_slices=extract_slices(ns, size),
                    target_slices=extract_slices(nt, size),
                )
            )
        return cls(cases=cases, split=split, size=size)

    def __len__(self) -> int:
        return len(self.index)

    def slice_pair(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        ci, z = self.index[i]
        case = self.cases[ci]
        return case.source_slices.data[z], case.target_slices.data[z]

    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]


def _read_sidecar(path: Path) -> dict:
    fields = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeIOError(f"{path}: bad sidecar line {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing", "modality"):
        if key not in fields:
            raise VolumeIOError(f"{path}: sidecar missing {key!r}")
    return fields


def load_volume(path: str, modality: str | None = None, case_id: str | None = None) -> Volume:
    """Read a NIfTI volume or the raw+sidecar fixture format."""
    p = Path(path)
    name = p.name
    if case_id is None:
        case_id = name.split(".")[0]
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        voxels, spacing, origin = read_nifti(str(p))
        return Volume(voxels, spacing, origin, modality or "CT", case_id)
    if name.endswith(".raw"):
        sidecar = p.with_suffix(".hdr")
        if not sidecar.exists():
            raise VolumeIOError(f"{p}: missing sidecar {sidecar.name}")
        fields = _read_sidecar(sidecar)
        dims = tuple(int(x) for x in fields["dims"].split(","))
        if len(dims) != 3:
            raise VolumeIOError(f"{sidecar}: dims must have 3 entries, got {fields['dims']!r}")
        spacing = tuple(float(x) for x in fields["spacing"].split(","))
        origin = tuple(float(x) for x in fields.get("origin", "0,0,0").split(","))
        dtype = np.dtype(fields.get("dtype", "float32")).newbyteorder("<")
        count = dims[0] * dims[1] * dims[2]
        try:
            buf = p.read_bytes()
        except OSError as exc:
            raise VolumeIOError(f"{p}: {exc}") from exc
        if len(buf) < count * dtype.itemsize:
            raise VolumeIOError(f"{p}: expected {count} voxels, file too short")
        voxels = np.frombuffer(buf[: count * dtype.itemsize], dtype=dtype).reshape(dims)
        return Volume(voxels, spacing, origin, modality or fields["modality"], case_id)
    raise VolumeIOError(f"{p}: unsupported volume format")


def save_volume(v: Volume, path: str, dtype=np.float32) -> None:
    """Write NIfTI for .nii/.nii.gz paths, raw+sidecar for .raw paths."""
    p = Path(path)
    if p.name.endswith(".nii") or p.name.endswith(".nii.gz"):
        write_nifti(str(p), v.voxels, v.spacing, v.origin, dtype=dtype)
        return
    if p.name.endswith(".raw"):
        np.ascontiguousarray(v.voxels, dtype=np.dtype(dtype).newbyteorder("<")).tofile(p)
        lines = [
            f"dims={','.join(str(d) for d in v.shape)}",
            f"spacing={','.join(repr(s) for s in v.spacing)}",
            f"origin={','.join(repr(o) for o in v.origin)}",
            f"modality={v.modality}",
            f"dtype={np.dtype(dtype).name}",
        ]
        p.with_suffix(".hdr").write_text("\n".join(lines) + "\n")
        return
    raise VolumeIOError(f"{p}: unsupported volume format")


def read_manifest(path: str) -> list[dict]:
    """Manifest: JSON list of {case_id, source, target} path entries."""
    p = Path(path)
    try:
        entries = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeIOError(f"{p}: {exc}") from exc
    if not isinstance(entries, list):
        raise VolumeIOError(f"{p}: manifest must be a JSON list")
    for e in entries:
        if not all(k in e for k in ("case_id", "source", "target")):
            raise VolumeIOError(f"{p}: manifest entry missing keys: {e}")
    return entries


def load_manifest_cases(
    manifest_path: str,
    case_ids: list[str] | None = None,
    source_modality: str = "CBCT",
    split: str = "train",
    size: int = 256,
) -> PairedDataset:
    """Load (a subset of) manifest cases into a PairedDataset."""
    root = Path(manifest_path).parent
    entries = read_manifest(manifest_path)
    if case_ids is not None:
        wanted = set(case_ids)
        entries = [e for e in entries if e["case_id"] in wanted]
        missing = wanted - {e["case_id"] for e in entries}
        if missing:
            raise ContractError(f"manifest lacks cases: {sorted(missing)}")
    pairs = []
    for e in entries:
        src = load_volume(str(root / e["source"]), modality=source_modality, case_id=e["case_id"])
        tgt = load_volume(str(root / e["target"]), modality="CT", case_id=e["case_id"])
        pairs.append((src, tgt))
    return PairedDataset.from_volume_pairs(pairs, split=split, size=size)
