from pathlib import Path

import numpy as np
import typer

from database.schema.models import TailUpweightConfig
from lib.distributions import is_heavy_tailed, make_distribution
from lib.tilting import sweep_upweighting
from utils.cli import build_config, emit, lab_errors, store_for
from utils.errors import InvalidParameterError
from utils.logger import get_logger

logger = get_logger(__name__)
router = typer.Typer()


@router.command("tilt-sweep")
def run_tilt_sweep(
    base: str = typer.Option(None, help="Base reward law, e.g. student_t:3"),
    c: float = typer.Option(None, help="Upweighting constant"),
    gamma: float = typer.Option(None, help="Exponent in the tail mass c/t^gamma"),
    t: str = typer.Option(None, "--t", help="Comma-separated thresholds"),
    allow_light: bool = typer.Option(None, "--allow-light", help="Run even when the base is not heavy-tailed"),
    output_dir: Path = typer.Option(None, help="Directory for artifacts"),
    workers: int = typer.Option(None, help="Worker threads across grid points"),
    config: Path = typer.Option(None, help="JSON file of option values"),
):
    """Tail-upweighted sweep over t: mass, mean and KL per threshold."""
    with lab_errors("tilt-sweep"):
        cfg = build_config(
            "tilt-sweep",
            config,
            {"base": "student_t:3", "c": 1.0, "gamma": 1.0, "t_grid": [10.0, 100.0, 1000.0, 10000.0], "allow_light": False},
            {
                "base": base,
                "c": c,
                "gamma": gamma,
                "t_grid": t,
                "allow_light": allow_light or None,
                "output_dir": str(output_dir) if output_dir else None,
                "workers": workers,
            },
        )
        opts = cfg.model_dump()
        for threshold in opts["t_grid"]:
            TailUpweightConfig(base=opts["base"], c=opts["c"], t=threshold, gamma=opts["gamma"])

        dist = make_distribution(opts["base"])
        verdict = is_heavy_tailed(dist).classification
        if verdict != "heavy" and not opts["allow_light"]:
            raise InvalidParameterError("base", opts["base"], f"tail looks {verdict}; pass --allow-light to sweep anyway")

        table = sweep_upweighting(dist, opts["c"], opts["gamma"], opts["t_grid"], cfg.workers)
        path = store_for(cfg).write_csv("tilt_sweep.csv", table)

        kl, mean = table["kl_exact"].to_numpy(), table["mean_decomposition"].to_numpy()
        emit(
            {
                "artifact": str(path),
                "rows": len(table),
                "base_tail": verdict,
                "kl_decreasing": bool(np.all(np.diff(kl) < 0)),
                "mean_increasing": bool(np.all(np.diff(mean) > 0)),
                "final_kl": float(kl[-1]),
                "final_mean": float(mean[-1]),
            }
        )
