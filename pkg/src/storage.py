"""Run directory: JSON reports and headered CSV tables."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Type, TypeVar

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

M = TypeVar("M", bound=BaseModel)


class RunStorage:
    """Writes the outputs of one command into ``out_dir``."""

    def __init__(self, out_dir):
        self._dir = Path(out_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._written: List[Path] = []

    @property
    def path(self) -> Path:
        return self._dir

    @property
    def written(self) -> List[Path]:
        return list(self._written)

    def save_report(self, name: str, report: BaseModel) -> Path:
        """Save a report as ``<name>.json``."""
        file = self._dir / f"{name}.json"
        with open(file, "w") as f:
            json.dump(report.model_dump(mode="json"), f, indent=2)
        return self._record(file)

    def save_document(self, name: str, document: Dict) -> Path:
        file = self._dir / f"{name}.json"
        with open(file, "w") as f:
            json.dump(document, f, indent=2)
        return self._record(file)

    def save_table(self, name: str, frame: pd.DataFrame) -> Path:
        """Save a table as ``<name>.csv`` with 17 significant digits."""
        file = self._dir / f"{name}.csv"
        frame.to_csv(file, index=False, float_format=FLOAT_FORMAT)
        return self._record(file)

    def load_report(self, name: str, model: Type[M]) -> M:
        with open(self._dir / f"{name}.json") as f:
            return model(**json.load(f))

    def load_table(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self._dir / f"{name}.csv")

    def _record(self, file: Path) -> Path:
        self._written.append(file)
        logger.info("wrote %s", file)
        return file
