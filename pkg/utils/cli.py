import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import typer
from pydantic import ValidationError

from database.files import ArtifactStore, to_builtin
from database.schema.models import ExperimentConfig
from settings import DEFAULT_SEED, OUTPUT_DIR, WORKERS
from utils.errors import EXIT_VALIDATION, InvalidParameterError, LabError
from utils.logger import get_logger

logger = get_logger(__name__)


def parse_grid(value, field: str = "grid", cast=float) -> list:
    """'10,100,1e3' or a JSON list -> list of numbers."""
    if value is None:
        return None
    items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
    try:
        return [cast(float(v)) if cast is int else cast(v) for v in items]
    except (TypeError, ValueError):
        raise InvalidParameterError(field, value, "expected a comma-separated list of numbers")


def build_config(subcommand: str, config_path: Path | None, defaults: dict, flags: dict) -> ExperimentConfig:
    """defaults < config file < explicit flags (None means the flag was not given)."""
    merged: dict[str, Any] = {"seed": DEFAULT_SEED, "output_dir": OUTPUT_DIR, "workers": WORKERS, **defaults}
    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidParameterError("config", str(config_path), f"unreadable config file: {e}")
        if not isinstance(file_values, dict):
            raise InvalidParameterError("config", str(config_path), "config file must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in file_values.items()})
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged["subcommand"] = subcommand
    for key in [k for k in merged if k.endswith("grid")]:
        merged[key] = parse_grid(merged[key], key, int if key == "k_grid" else float)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "config"
        raise InvalidParameterError(field, first.get("input"), first["msg"])


def store_for(config: ExperimentConfig) -> ArtifactStore:
    return ArtifactStore(config.output_dir, config.model_dump())


def emit(summary: dict) -> None:
    typer.echo(json.dumps(to_builtin(summary), indent=2, sort_keys=True))


@contextmanager
def lab_errors(command: str):
    """Maps library errors to exit codes: 1 validation, 2 numeric, 3 suite."""
    try:
        yield
    except LabError as e:
        logger.error(f"{command}: {type(e).__name__}: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=e.exit_code)
    except ValidationError as e:
        logger.error(f"{command}: invalid input: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=EXIT_VALIDATION)
