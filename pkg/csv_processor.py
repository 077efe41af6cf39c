import io
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import pandas as pd

from errors import FormatError
from evaluation import RecallReport


class CSVProcessor:
    """Writes, reads and validates the CSV outputs of training, evaluation and gradient checks"""

    def __init__(self, num_stages: int = 2):
        self.metrics_columns = (
            ['epoch', 'total_loss']
            + [f'reg_loss_stage{t}' for t in range(1, num_stages + 1)]
            + ['cls_loss', 'ar_10', 'ar_100', 'lr']
        )
        self.recall_columns = ['k', 'iou_threshold', 'recall']
        self.summary_columns = ['k', 'AR', 'AR_S', 'AR_M', 'AR_L']
        self.gradcheck_columns = ['op', 'instances', 'max_rel_error', 'passed']

    def _validate(self, df: pd.DataFrame, required: Sequence[str], what: str) -> pd.DataFrame:
        missing_columns = [col for col in required if col not in df.columns]
        if missing_columns:
            raise FormatError(f"{what} is missing required columns: {missing_columns}", 0)
        return df

    def metrics_frame(self, rows: List[Dict]) -> pd.DataFrame:
        """One row per epoch in the fixed column order"""
        return pd.DataFrame(rows, columns=self.metrics_columns)

    def write_metrics(self, df: pd.DataFrame, path) -> None:
        self._validate(df, self.metrics_columns, "metrics table")
        df[self.metrics_columns].to_csv(path, index=False)

    def read_metrics(self, path) -> pd.DataFrame:
        df = pd.read_csv(path)
        df.columns = df.columns.str.strip()
        return self._validate(df, self.metrics_columns, f"metrics file {path}")

    def merge_metrics(self, previous: pd.DataFrame, new: pd.DataFrame) -> pd.DataFrame:
        """Previous epochs followed by the new ones; rows of re-run epochs are replaced"""
        if new.empty:
            return previous.reset_index(drop=True)
        kept = previous[previous['epoch'] < new['epoch'].min()]
        return pd.concat([kept, new], ignore_index=True)

    def write_recall_report(self, report: RecallReport, path) -> None:
        """Detail block (k, iou_threshold, recall), a blank line, then the summary block"""
        with open(path, 'w', newline='') as f:
            report.detail_frame().to_csv(f, index=False)
            f.write('\n')
            report.summary_frame().to_csv(f, index=False)

    def read_recall_report(self, path) -> Tuple[pd.DataFrame, pd.DataFrame]:
        text = Path(path).read_text()
        blocks = [b for b in text.replace('\r\n', '\n').split('\n\n') if b.strip()]
        if len(blocks) != 2:
            raise FormatError(f"recall report {path} needs a detail and a summary block, found {len(blocks)}", 0)
        detail = self._validate(pd.read_csv(io.StringIO(blocks[0])), self.recall_columns, "recall detail block")
        summary = self._validate(pd.read_csv(io.StringIO(blocks[1])), self.summary_columns, "recall summary block")
        return detail, summary

    def gradcheck_frame(self, results) -> pd.DataFrame:
        rows = [{'op': r.op, 'instances': r.instances, 'max_rel_error': r.max_rel_error, 'passed': r.passed}
                for r in results]
        return pd.DataFrame(rows, columns=self.gradcheck_columns)

    def write_gradcheck_report(self, results, path) -> None:
        self.gradcheck_frame(results).to_csv(path, index=False)
