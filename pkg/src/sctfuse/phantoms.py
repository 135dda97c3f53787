"""Synthetic volumes for tests, demos, and desk-scale ablations.

Real paired scans cannot ship with the package, so every end-to-end path
is exercised on procedurally generated phantoms: CT-like volumes with
body/bone/air structure and multi-octave texture, a dyadic variant whose
HU values survive the normalization round trip bit-exactly, two-organ
volumes for the toy segmenter, and a paired translation task (target =
smoothed source plus a source-derived low-frequency field) whose
difficulty separates the generator variants.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import CT_CENTER, CT_CLIP_HI, CT_CLIP_LO, CT_HALF_SPAN, Volume, save_volume


def fractal_noise(shape: tuple[int, int], octaves: int, rng: np.random.Generator, amplitude: float = 1.0) -> np.ndarray:
    """Sum of bilinearly upsampled white-noise octaves, equal power per octave."""
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    for o in range(octaves):
        step = 2**o
        gh, gw = max(2, h // step), max(2, w // step)
        grid = rng.standard_normal((1, 1, gh, gw))
        up = F.interpolate(
            torch.from_numpy(grid), size=(h, w), mode="bilinear", align_corners=False
        )
        out += up[0, 0].numpy()
    return out * (amplitude / math.sqrt(octaves))


def _ellipse_mask(shape: tuple[int, int], center: tuple[float, float], radii: tuple[float, float]) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = center
    ry, rx = radii
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def structured_ct(
    shape: tuple[int, int, int] = (4, 64, 64), seed: int = 0, case_id: str = "phantom"
) -> Volume:
    """CT-like phantom: air background, soft-tissue body, bone ring, texture.

    Carries variance at every dyadic scale so similarity metrics see
    structure from fine to coarse.
    """
    d, h, w = shape
    rng = np.random.default_rng(seed)
    voxels = np.full(shape, -1000.0, dtype=np.float64)
    body = _ellipse_mask((h, w), (h / 2, w / 2), (h * 0.42, w * 0.45))
    bone = _ellipse_mask((h, w), (h / 2, w / 2), (h * 0.30, w * 0.33)) & ~_ellipse_mask(
        (h, w), (h / 2, w / 2), (h * 0.24, w * 0.27)
    )
    for z in range(d):
        tissue = 40.0 + 25.0 * math.sin(z + 1)
        sl = np.full((h, w), -1000.0)
        sl[body] = tissue
        sl[bone] = 700.0 + 30.0 * z
        pocket = _ellipse_mask((h, w), (h * (0.35 + 0.05 * z), w * 0.55), (h * 0.06, w * 0.08))
        sl[pocket & body] = -800.0
        octaves = max(2, int(math.log2(min(h, w))) - 2)
        sl = sl + fractal_noise((h, w), octaves, rng, amplitude=220.0) * body
        voxels[z] = sl
    voxels = np.clip(voxels, CT_CLIP_LO, CT_CLIP_HI)
    return Volume(voxels=voxels, spacing=(2.5, 1.0, 1.0), modality="CT", case_id=case_id)


def snap_to_dyadic(voxels: np.ndarray, bits: int = 8) -> np.ndarray:
    """Quantize HU so normalize/denormalize is bit-exact in float64.

    Values become CT_CENTER + CT_HALF_SPAN * j / 2^bits with integer j,
    which the affine [-1,1] map reproduces without rounding error.
    """
    unit = np.clip((voxels - CT_CENTER) / CT_HALF_SPAN, -1.0, 1.0)
    scale = float(2**bits)
    return CT_CENTER + CT_HALF_SPAN * (np.round(unit * scale) / scale)


def dyadic_ct(
    shape: tuple[int, int, int] = (4, 64, 64), seed: int = 0, case_id: str = "dyadic"
) -> Volume:
    """Structured phantom snapped to the dyadic HU grid."""
    v = structured_ct(shape, seed, case_id)
    return Volume(
        voxels=snap_to_dyadic(v.voxels),
        spacing=v.spacing,
        origin=v.origin,
        modality="CT",
        case_id=case_id,
    )


ORGAN_BANDS = {"bladder": (250.0, 350.0), "prostate": (650.0, 750.0)}


def two_organ_ct(
    shape: tuple[int, int, int] = (4, 64, 64),
    shift: tuple[int, int] = (0, 0),
    case_id: str = "organs",
) -> Volume:
    """Water background with two organs in distinct HU bands.

    `shift` moves the first organ in (y, x); used to produce mask
    overlaps with hand-countable Dice values.
    """
    d, h, w = shape
    voxels = np.zeros(shape, dtype=np.float64)
    a = _ellipse_mask((h, w), (h * 0.4 + shift[0], w * 0.35 + shift[1]), (h * 0.15, w * 0.15))
    b = _ellipse_mask((h, w), (h * 0.6, w * 0.65), (h * 0.12, w * 0.18))
    for z in range(d):
        sl = np.zeros((h, w))
        sl[a] = 300.0
        sl[b] = 700.0
        voxels[z] = sl
    return Volume(voxels=voxels, spacing=(2.5, 1.0, 1.0), modality="CT", case_id=case_id)


def translation_pair(
    shape: tuple[int, int, int],
    seed: int,
    case_id: str,
    source_modality: str = "CBCT",
    smooth_rounds: int = 2,
    coarse_stride: int = 16,
    coarse_gain: float = 0.35,
) -> tuple[Volume, Volume]:
    """One paired case: target = smoothed source + source-derived coarse field.

    The target keeps mid-frequency anatomy (needs full-resolution
    processing) and adds a global component computable from the source's
    own coarse statistics (rewards long-range context).
    """
    src = structured_ct(shape, seed, case_id)
    t = torch.from_numpy(src.voxels).unsqueeze(1)
    smooth = t
    for _ in range(smooth_rounds):
        smooth = F.avg_pool2d(F.pad(smooth, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    coarse = F.avg_pool2d(t, coarse_stride)
    coarse = F.interpolate(coarse, size=t.shape[-2:], mode="bilinear", align_corners=False)
    tgt_vox = smooth[:, 0].numpy() + coarse_gain * (coarse[:, 0].numpy() - t[:, 0].numpy().mean())
    tgt = Volume(
        voxels=np.clip(tgt_vox, CT_CLIP_LO, CT_CLIP_HI),
        spacing=src.spacing,
        origin=src.origin,
        modality="CT",
        case_id=case_id,
    )
    source = Volume(
        voxels=src.voxels,
        spacing=src.spacing,
        origin=src.origin,
        modality=source_modality,
        case_id=case_id,
    )
    return source, tgt


def make_translation_cases(
    n_cases: int,
    shape: tuple[int, int, int] = (2, 64, 64),
    seed: int = 0,
    source_modality: str = "CBCT",
) -> list[tuple[Volume, Volume]]:
    return [
        translation_pair(shape, seed * 7919 + i, f"case{i:03d}", source_modality)
        for i in range(n_cases)
    ]


def write_phantom_dataset(
    root: str,
    n_cases: int = 40,
    shape: tuple[int, int, int] = (2, 64, 64),
    seed: int = 0,
    source_modality: str = "CBCT",
    fmt: str = "nii.gz",
) -> str:
    """Write paired phantom volumes plus a manifest; returns the manifest path."""
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for source, target in make_translation_cases(n_cases, shape, seed, source_modality):
        src_name = f"{source.case_id}_{source_modality.lower()}.{fmt}"
        tgt_name = f"{source.case_id}_ct.{fmt}"
        save_volume(source, str(out / src_name), dtype=np.float32)
        save_volume(target, str(out / tgt_name), dtype=np.float32)
        entries.append({"case_id": source.case_id, "source": src_name, "target": tgt_name})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n")
    return str(manifest)
