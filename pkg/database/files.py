import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from settings import APP_NAME, APP_VERSION, OUTPUT_DIR
from utils.errors import EmptySampleFileError, SampleParseError
from utils.logger import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = "%.17g"


def to_builtin(value: Any) -> Any:
    """Converts numpy scalars/arrays and pydantic models into JSON-ready values."""
    if hasattr(value, "model_dump"):
        return to_builtin(value.model_dump())
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_builtin(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


class ArtifactStore:
    """File-backed store for sweep tables and reports.

    Every artifact carries a metadata block (artifact name, version, config echo)
    and nothing time-dependent, so reruns with the same config are byte-identical.
    """

    def __init__(self, output_dir: str | Path | None = None, config: dict | None = None):
        self.output_dir = Path(output_dir or OUTPUT_DIR)
        self.config = to_builtin(config or {})

    def _path(self, name: str) -> Path:
        if not name:
            raise ValueError("Artifact name cannot be empty")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name

    def metadata(self, artifact: str) -> dict:
        return {"artifact": artifact, "version": f"{APP_NAME} {APP_VERSION}", "config": self.config}

    def render_csv(self, name: str, table: pd.DataFrame) -> str:
        meta = self.metadata(name)
        header = [
            f"# artifact: {meta['artifact']}",
            f"# version: {meta['version']}",
            f"# config: {json.dumps(meta['config'], sort_keys=True)}",
        ]
        body = table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return "\n".join(header) + "\n" + body

    def render_json(self, name: str, payload: dict) -> str:
        document = {"metadata": self.metadata(name), **to_builtin(payload)}
        return json.dumps(document, indent=2, sort_keys=True) + "\n"

    def write_csv(self, name: str, table: pd.DataFrame) -> Path:
        path = self._path(name)
        path.write_text(self.render_csv(name, table), encoding="utf-8")
        logger.info(f"Wrote {len(table)} rows to {path}")
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self._path(name)
        path.write_text(self.render_json(name, payload), encoding="utf-8")
        logger.info(f"Wrote report {path}")
        return path

    def export_samples(self, values, path: str | Path, format: str = "csv_single_column") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        values = [float(v) for v in values]
        if format == "csv_single_column":
            text = "\n".join(FLOAT_FORMAT % v for v in values) + "\n"
        elif format == "json_array":
            text = json.dumps(values) + "\n"
        else:
            raise ValueError(f"Unknown sample format '{format}'")
        path.write_text(text, encoding="utf-8")
        logger.info(f"Exported {len(values)} samples to {path}")
        return path

    def read_text_rows(self, path: str | Path) -> list[list[str]]:
        """Raw CSV cells as strings; `#` lines are metadata and skipped."""
        path = Path(path)
        try:
            frame = pd.read_csv(
                path,
                header=None,
                dtype=str,
                comment="#",
                keep_default_na=False,
                skip_blank_lines=True,
            )
        except pd.errors.EmptyDataError:
            raise EmptySampleFileError(f"{path}: no data rows")
        except pd.errors.ParserError as e:
            logger.error(f"read_text_rows failed for {path}: {e}")
            raise SampleParseError(str(path), 0, 0, f"malformed CSV: {e}")
        return frame.values.tolist()

    def read_json(self, path: str | Path) -> Any:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if not text.strip():
            raise EmptySampleFileError(f"{path}: file is empty")
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            logger.error(f"read_json failed for {path}: {e}")
            raise SampleParseError(str(path), e.lineno, e.colno, e.msg)
