"""Volume-level evaluation: multi-scale SSIM, PSNR, organ-overlap score.

All metrics run on reassembled HU volumes against the clipped ground
truth. Similarity uses the standard five-scale formulation (11-tap
Gaussian window, sigma 1.5) computed per axial slice and averaged;
intensity fidelity uses PSNR over the fixed 3024 HU window; anatomical
plausibility segments both volumes with the same segmenter and averages
per-organ Dice. Reports aggregate per-case rows and compare against a
baseline with a two-sided paired t-test.
"""

from __future__ import annotations

import dataclasses
import json
import math
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .data import (
    CT_CLIP_HI,
    CT_CLIP_LO,
    HU_RANGE,
    PairedCase,
    PairedDataset,
    Volume,
    extract_slices,
    load_volume,
    normalize_volume,
    reassemble,
    save_volume,
)
from .errors import ContractError
from .generator import FusionGenerator
from .training import TrainConfig, TrainResult, train

# Standard five-scale exponents, fine to coarse.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_voxels(v) -> np.ndarray:
    if isinstance(v, Volume):
        return v.voxels
    return np.asarray(v, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"volume shapes differ: {a.shape} vs {b.shape}")


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    half = (size - 1) / 2.0
    x = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter2d(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable Gaussian, valid region only
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k))
    return F.conv2d(x, win.view(1, 1, k, 1))


def _ssim_per_slice(
    x: torch.Tensor, y: torch.Tensor, data_range: float, win: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean SSIM and contrast-structure term per slice of [D,1,H,W] inputs."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter2d(x, win)
    mu_y = _filter2d(y, win)
    sigma_x = _filter2d(x * x, win) - mu_x * mu_x
    sigma_y = _filter2d(y * y, win) - mu_y * mu_y
    sigma_xy = _filter2d(x * y, win) - mu_x * mu_y
    cs_map = (2.0 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    lum_map = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    ssim_map = lum_map * cs_map
    return ssim_map.mean(dim=(1, 2, 3)), cs_map.mean(dim=(1, 2, 3))


def ms_ssim(pred, gt, scales: int = 5, data_range: float = HU_RANGE) -> float:
    """Multi-scale SSIM in [0, 1], slice-wise mean over the volume.

    Contrast-structure terms enter at every scale, luminance only at the
    coarsest; scales shrink (with a warning) when the in-plane size
    cannot support five halvings under an 11-tap window.
    """
    a, b = _as_voxels(pred), _as_voxels(gt)
    _check_same_shape(a, b)
    if scales < 1 or scales > len(MS_SSIM_WEIGHTS):
        raise ContractError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    min_hw = min(a.shape[1], a.shape[2])
    usable = scales
    while usable > 1 and (min_hw >> (usable - 1)) < SSIM_WINDOW:
        usable -= 1
    if (min_hw >> (usable - 1)) < SSIM_WINDOW:
        raise ContractError(f"in-plane size {min_hw} too small for an {SSIM_WINDOW}-tap window")
    if usable < scales:
        warnings.warn(
            f"in-plane size {min_hw} supports only {usable} of {scales} scales", stacklevel=2
        )
    raw = MS_SSIM_WEIGHTS[:usable]
    weights = [w / sum(raw) for w in raw]

    x = torch.from_numpy(np.ascontiguousarray(a)).unsqueeze(1)
    y = torch.from_numpy(np.ascontiguousarray(b)).unsqueeze(1)
    win = _gaussian_window()
    per_slice = torch.ones(x.shape[0], dtype=torch.float64)
    for s in range(usable):
        ssim_s, cs_s = _ssim_per_slice(x, y, data_range, win)
        if s < usable - 1:
            per_slice = per_slice * torch.clamp(cs_s, min=0.0) ** weights[s]
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        else:
            per_slice = per_slice * torch.clamp(ssim_s, min=0.0) ** weights[s]
    return float(per_slice.mean().item())


def psnr(pred, gt, data_range: float = HU_RANGE) -> float:
    """10*log10(range^2 / MSE); +inf when the volumes are identical."""
    a, b = _as_voxels(pred), _as_voxels(gt)
    _check_same_shape(a, b)
    if data_range <= 0:
        raise ContractError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient 2|a&b| / (|a|+|b|); two empty masks count as 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


class ThresholdBandSegmenter:
    """Toy deterministic segmenter: one HU band per organ.

    Desk-scale stand-in for a real segmentation model; bands must not
    overlap, and labels follow organ order (1-based, 0 = background).
    """

    def __init__(self, bands: dict[str, tuple[float, float]], name: str = "threshold-band"):
        self.name = name
        self.bands = dict(bands)
        self.organs = list(bands)
        spans = sorted(self.bands.values())
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
            if hi1 > lo2:
                raise ContractError(f"overlapping HU bands: ({lo1},{hi1}) and ({lo2},{hi2})")

    def __call__(self, v: Volume) -> np.ndarray:
        vox = _as_voxels(v)
        labels = np.zeros(vox.shape, dtype=np.int32)
        for i, organ in enumerate(self.organs, start=1):
            lo, hi = self.bands[organ]
            labels[(vox >= lo) & (vox <= hi)] = i
        return labels


class CommandSegmenter:
    """Adapter that shells out to an external segmentation tool.

    The command template receives {input} and {output} volume paths; the
    tool must write an integer label volume; `labels` maps organ name to
    the tool's label id.
    """

    def __init__(self, command: list[str], labels: dict[str, int], name: str = "command"):
        self.name = name
        self.command = list(command)
        self.labels = dict(labels)
        self.organs = list(labels)

    def __call__(self, v: Volume) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="seg") as tmp:
            in_path = str(Path(tmp) / "in.nii.gz")
            out_path = str(Path(tmp) / "out.nii.gz")
            save_volume(v, in_path)
            cmd = [c.format(input=in_path, output=out_path) for c in self.command]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(f"segmenter failed ({proc.returncode}): {proc.stderr[-500:]}")
            raw = load_volume(out_path, modality="CT").voxels
        labels = np.zeros(raw.shape, dtype=np.int32)
        for i, organ in enumerate(self.organs, start=1):
            labels[raw == self.labels[organ]] = i
        return labels


@dataclass
class SegScore:
    value: float | None
    per_organ: dict[str, float]
    skipped: list[str]


def seg_score(pred: Volume, gt: Volume, segmenter, organs: list[str] | None = None) -> SegScore:
    """Mean Dice between segmentations of prediction and ground truth.

    Organs absent from both segmentations are skipped and recorded; an
    organ present on one side only scores 0.
    """
    organs = list(organs) if organs is not None else list(segmenter.organs)
    labels_pred = segmenter(pred)
    labels_gt = segmenter(gt)
    vox = _as_voxels(gt)
    if labels_pred.shape != vox.shape or labels_gt.shape != vox.shape:
        raise ContractError("segmenter returned a label map of the wrong shape")
    per_organ: dict[str, float] = {}
    skipped: list[str] = []
    for organ in organs:
        idx = segmenter.organs.index(organ) + 1
        mask_p = labels_pred == idx
        mask_g = labels_gt == idx
        if not mask_p.any() and not mask_g.any():
            skipped.append(organ)
            continue
        per_organ[organ] = dice(mask_p, mask_g)
    value = sum(per_organ.values()) / len(per_organ) if per_organ else None
    return SegScore(value=value, per_organ=per_organ, skipped=skipped)


@dataclass
class TTestResult:
    statistic: float | None
    p_value: float | None
    dof: int
    degenerate: bool

    def describe(self) -> str:
        if self.degenerate:
            return "degenerate (zero-variance differences)"
        return f"t={self.statistic:.4f}, p={self.p_value:.3g}, dof={self.dof}"


def paired_t_test(scores_a: list[float], scores_b: list[float]) -> TTestResult:
    """Two-sided paired t-test on per-case score differences."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired scores must be equal-length lists, got {a.shape}, {b.shape}")
    if a.size < 2:
        raise ContractError("paired t-test needs at least 2 cases")
    d = a - b
    sd = float(d.std(ddof=1))
    n = d.size
    if sd == 0.0:
        return TTestResult(statistic=None, p_value=None, dof=n - 1, degenerate=True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = 2.0 * float(stats.t.sf(abs(t), n - 1))
    return TTestResult(statistic=t, p_value=p, dof=n - 1, degenerate=False)


@dataclass
class MetricResult:
    case_id: str
    ms_ssim: float
    psnr: float
    seg_score: float | None = None
    per_organ: dict[str, float] = field(default_factory=dict)
    skipped_organs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.ms_ssim <= 1.0:
            raise ContractError(f"ms_ssim out of [0,1]: {self.ms_ssim}")
        for organ, v in self.per_organ.items():
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"dice out of [0,1] for {organ}: {v}")


@dataclass
class EvalReport:
    results: list[MetricResult]
    segmenter_name: str | None = None
    failures: list[dict] = field(default_factory=list)
    notes: list[str] = field(
        default_factory=lambda: ["organ masks empty on both sides score Dice 1.0 and are skipped"]
    )

    def aggregates(self) -> dict[str, float | None]:
        if not self.results:
            return {"ms_ssim": None, "psnr": None, "seg_score": None}
        seg = [r.seg_score for r in self.results if r.seg_score is not None]
        return {
            "ms_ssim": sum(r.ms_ssim for r in self.results) / len(self.results),
            "psnr": sum(r.psnr for r in self.results) / len(self.results),
            "seg_score": sum(seg) / len(seg) if seg else None,
        }

    @staticmethod
    def _fmt(value: float | None, percent: bool) -> str:
        if value is None:
            return "-"
        if math.isinf(value):
            return "inf"
        return f"{value * 100:.2f}" if percent else f"{value:.2f}"

    def render(self) -> str:
        rows = [f"{'Case':<12} {'SSIM (%)':>10} {'PSNR (dB)':>10} {'SegScore (%)':>13}"]
        for r in sorted(self.results, key=lambda r: r.case_id):
            rows.append(
                f"{r.case_id:<12} {self._fmt(r.ms_ssim, True):>10} "
                f"{self._fmt(r.psnr, False):>10} {self._fmt(r.seg_score, True):>13}"
            )
        agg = self.aggregates()
        rows.append(
            f"{'mean':<12} {self._fmt(agg['ms_ssim'], True):>10} "
            f"{self._fmt(agg['psnr'], False):>10} {self._fmt(agg['seg_score'], True):>13}"
        )
        if self.segmenter_name is None:
            rows.append("SegScore unavailable: no segmenter configured")
        for f in self.failures:
            rows.append(f"FAILED {f['case_id']}: {f['error']}")
        for note in self.notes:
            rows.append(f"note: {note}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "results": [dataclasses.asdict(r) for r in sorted(self.results, key=lambda r: r.case_id)],
            "aggregates": self.aggregates(),
            "segmenter": self.segmenter_name,
            "failures": self.failures,
            "notes": self.notes,
        }

    def save(self, path: str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def compare_reports(report_a: EvalReport, report_b: EvalReport) -> dict[str, TTestResult]:
    """Paired significance tests between two reports, metric by metric."""
    by_id_a = {r.case_id: r for r in report_a.results}
    by_id_b = {r.case_id: r for r in report_b.results}
    if set(by_id_a) != set(by_id_b):
        raise ContractError("reports cover different case sets")
    ids = sorted(by_id_a)
    out = {
        "ms_ssim": paired_t_test(
            [by_id_a[i].ms_ssim for i in ids], [by_id_b[i].ms_ssim for i in ids]
        ),
        "psnr": paired_t_test([by_id_a[i].psnr for i in ids], [by_id_b[i].psnr for i in ids]),
    }
    if all(by_id_a[i].seg_score is not None and by_id_b[i].seg_score is not None for i in ids):
        out["seg_score"] = paired_t_test(
            [by_id_a[i].seg_score for i in ids], [by_id_b[i].seg_score for i in ids]
        )
    return out


def model_predictor(model: FusionGenerator, batch_size: int = 4):
    """Wrap a trained model as a per-case slice predictor."""

    def predict(case: PairedCase) -> torch.Tensor:
        model.eval()
        src = case.source_slices.data
        chunks = []
        with torch.no_grad():
            for start in range(0, src.shape[0], batch_size):
                chunk = src[start : start + batch_size].to(torch.float32)
                chunks.append(model(chunk))
        return torch.cat(chunks, dim=0)

    return predict


def clipped_ground_truth(case: PairedCase) -> Volume:
    """The evaluation target: the reference CT clipped to the HU window."""
    ref = case.target.source
    return Volume(
        voxels=np.clip(ref.voxels, CT_CLIP_LO, CT_CLIP_HI),
        spacing=ref.spacing,
        origin=ref.origin,
        modality="CT",
        case_id=ref.case_id,
    )


def evaluate_run(predict_fn, dataset: PairedDataset, segmenter=None) -> EvalReport:
    """Forward every case, reassemble to HU, score against clipped ground truth.

    A failing case is recorded in the report, not fatal.
    """
    results, failures = [], []
    for case in dataset.cases:
        try:
            pred_slices = predict_fn(case)
            pred_vol = reassemble(pred_slices, case.target.source)
            gt_vol = clipped_ground_truth(case)
            seg_value, per_organ, skipped = None, {}, []
            if segmenter is not None:
                seg = seg_score(pred_vol, gt_vol, segmenter)
                seg_value, per_organ, skipped = seg.value, seg.per_organ, seg.skipped
            results.append(
                MetricResult(
                    case_id=case.case_id,
                    ms_ssim=ms_ssim(pred_vol, gt_vol),
                    psnr=psnr(pred_vol, gt_vol),
                    seg_score=seg_value,
                    per_organ=per_organ,
                    skipped_organs=skipped,
                )
            )
        except Exception as exc:  # noqa: BLE001 - per-case isolation is the contract
            warnings.warn(f"case {case.case_id} failed: {exc}", stacklevel=2)
            failures.append({"case_id": case.case_id, "error": str(exc)})
    return EvalReport(
        results=results,
        segmenter_name=getattr(segmenter, "name", None) if segmenter else None,
        failures=failures,
    )


def translate_volume(model: FusionGenerator, volume: Volume, batch_size: int = 4) -> Volume:
    """Normalize, slice, forward, and reassemble one volume into HU space."""
    nv = normalize_volume(volume)
    stack = extract_slices(nv, size=model.config.input_size)
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, stack.data.shape[0], batch_size):
            chunk = stack.data[start : start + batch_size].to(torch.float32)
            chunks.append(model(chunk))
    return reassemble(torch.cat(chunks, dim=0), volume)


@dataclass
class AblationEntry:
    variant: str
    trainable_params: int
    best_val_l1: float
    final_val_l1: float


@dataclass
class AblationReport:
    entries: list[AblationEntry]

    def by_variant(self) -> dict[str, AblationEntry]:
        return {e.variant: e for e in self.entries}

    def render(self) -> str:
        rows = [f"{'Variant':<14} {'Params':>10} {'Best val L1':>12} {'Final val L1':>13}"]
        for e in self.entries:
            rows.append(
                f"{e.variant:<14} {e.trainable_params:>10} "
                f"{e.best_val_l1:>12.5f} {e.final_val_l1:>13.5f}"
            )
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {"entries": [dataclasses.asdict(e) for e in self.entries]}


def run_ablation(
    base: TrainConfig,
    train_dataset: PairedDataset,
    val_dataset: PairedDataset,
    backbone,
    variants: tuple[str, ...] = ("cross-fusion", "concat", "cnn-only", "vit-only"),
    out_dir: str | None = None,
) -> AblationReport:
    """Train each generator variant under an identical budget and compare val L1."""
    if val_dataset is None or len(val_dataset) == 0:
        raise ContractError("ablation requires a validation split")
    entries = []
    for variant in variants:
        cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, variant=variant))
        run_out = str(Path(out_dir) / variant) if out_dir else None
        result: TrainResult = train(cfg, train_dataset, backbone, val_dataset=val_dataset, out_dir=run_out)
        vals = [r["val_l1"] for r in result.log.val_records]
        entries.append(
            AblationEntry(
                variant=variant,
                trainable_params=result.model.trainable_parameter_count(),
                best_val_l1=min(vals),
                final_val_l1=vals[-1],
            )
        )
    return AblationReport(entries=entries)
