import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from kidney.errors import GeometryError
from kidney.utils.logger import configure_logger
from kidney.utils.volume_utils import LabelVolume, case_paths, list_label_cases, read_volume


logger = logging.getLogger(__name__)
configure_logger(logger)


REPORT_COLUMNS = ["volume_id", "dice_kidney", "dice_tumor"]
TABLE_COLUMNS = ["model", "dice_kidney", "dice_tumor"]


def _voxels(mask) -> np.ndarray:
    return mask.voxels if isinstance(mask, LabelVolume) else np.asarray(mask)


def dice(gt_mask, pred_mask) -> float:
    """2 |A n B| / (|A| + |B|) over binary masks; two empty masks score 1.0.

    Raises:
        GeometryError: If the masks differ in shape or spacing.
    """
    if isinstance(gt_mask, LabelVolume) and isinstance(pred_mask, LabelVolume) and not gt_mask.same_geometry(pred_mask):
        raise GeometryError("Dice needs masks with identical geometry")
    gt, pred = _voxels(gt_mask).astype(bool), _voxels(pred_mask).astype(bool)
    if gt.shape != pred.shape:
        logger.error(f"Dice shape mismatch {gt.shape} vs {pred.shape}")
        raise GeometryError(f"Dice needs masks of identical shape, got {gt.shape} and {pred.shape}")
    total = int(gt.sum()) + int(pred.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(gt, pred).sum()) / total


def evaluate_case(gt, pred) -> tuple[float, float]:
    """Returns (kidney+tumor composite Dice, tumor Dice) for one labelled volume."""
    gt_voxels, pred_voxels = _voxels(gt), _voxels(pred)
    if isinstance(gt, LabelVolume) and isinstance(pred, LabelVolume) and not gt.same_geometry(pred):
        raise GeometryError("Prediction geometry does not match the ground truth")
    return dice(gt_voxels > 0, pred_voxels > 0), dice(gt_voxels == 2, pred_voxels == 2)


@dataclass
class DiceReport:
    """Per-volume Dice rows for one model (or the ensemble) and their summary."""
    name: str
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=REPORT_COLUMNS))
    empty_tumor: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {
            column: (float(self.rows[column].astype(float).mean()), float(self.rows[column].astype(float).std(ddof=0)))
            for column in ("dice_kidney", "dice_tumor")
        }

    def summary_cells(self) -> dict[str, str]:
        return {column: f"{mean:.4f}±{std:.4f}" for column, (mean, std) in self.summary().items()}

    def to_csv(self, path: str | Path) -> None:
        """Writes the rows plus a ``summary`` row holding mean±std cells."""
        table = self.rows.copy()
        table["dice_kidney"] = table["dice_kidney"].map(lambda v: f"{v:.6f}")
        table["dice_tumor"] = table["dice_tumor"].map(lambda v: f"{v:.6f}")
        summary = pd.DataFrame([{"volume_id": "summary", **self.summary_cells()}])
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        pd.concat([table, summary], ignore_index=True)[REPORT_COLUMNS].to_csv(path, index=False)
        logger.info(f"Wrote Dice report for {self.name} to {path}")


def evaluate_directory(pred_dir: str | Path, gt_dir: str | Path, name: str = "model",
                       jobs: int = 1) -> DiceReport:
    """Scores every ground-truth case against the prediction with the same id.

    Predictions are looked up as ``<id>.seg.kvl`` in ``pred_dir``.

    Raises:
        FileNotFoundError: If a prediction is missing.
        GeometryError: If the ground-truth directory holds no labelled cases.
    """
    logger.info(f"Received request to evaluate {pred_dir} against {gt_dir}")
    volume_ids = list_label_cases(gt_dir)
    if not volume_ids:
        logger.error(f"No ground-truth label volumes in {gt_dir}")
        raise GeometryError(f"No ground-truth label volumes in {gt_dir}")

    def score(volume_id: str) -> tuple[str, float, float, bool]:
        gt = read_volume(case_paths(gt_dir, volume_id)[1])
        pred = read_volume(case_paths(pred_dir, volume_id)[1])
        kidney, tumor = evaluate_case(gt, pred)
        return volume_id, kidney, tumor, not (gt.voxels == 2).any()

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(score, volume_ids))

    report = DiceReport(name, pd.DataFrame([r[:3] for r in results], columns=REPORT_COLUMNS))
    report.empty_tumor = [r[0] for r in results if r[3]]
    for volume_id in report.empty_tumor:
        logger.warning(f"Ground truth of {volume_id} has no tumor; its tumor Dice uses the empty-empty rule")
    cells = report.summary_cells()
    logger.info(f"Successfully evaluated {len(results)} volumes for {name}: "
                f"kidney {cells['dice_kidney']}, tumor {cells['dice_tumor']}")
    return report


def _write_rows(rows: list[dict], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=TABLE_COLUMNS).to_csv(path, index=False)


def write_table(reports: list[DiceReport], path: str | Path) -> None:
    """Writes one ``model,dice_kidney,dice_tumor`` row of mean±std cells per report."""
    _write_rows([{"model": report.name, **report.summary_cells()} for report in reports], path)
    logger.info(f"Wrote summary table with {len(reports)} rows to {path}")


def update_table(report: DiceReport, path: str | Path) -> None:
    """Adds a report's row to a summary table, replacing any earlier row with the same model name."""
    rows = []
    if Path(path).exists():
        rows = [row for row in pd.read_csv(path, dtype=str).to_dict("records") if row["model"] != report.name]
    rows.append({"model": report.name, **report.summary_cells()})
    _write_rows(rows, path)
    logger.info(f"Updated summary table {path} with {report.name}")
