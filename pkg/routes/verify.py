from pathlib import Path

import typer

from lib.verification_pipeline import SUITES, VerificationPipeline, ensure_passed, render_summary
from utils.cli import build_config, emit, lab_errors, store_for
from utils.logger import get_logger

logger = get_logger(__name__)
router = typer.Typer()


@router.command("verify")
def run_verify(
    only: list[str] = typer.Option(None, "--only", help=f"Suites to run: {', '.join(SUITES)}"),
    break_tilt_formula: bool = typer.Option(None, "--break-tilt-formula", hidden=True),
    seed: int = typer.Option(None, help="Master seed"),
    workers: int = typer.Option(None, help="Worker threads for replication studies"),
    output_dir: Path = typer.Option(None, help="Directory for the JSON report"),
    config: Path = typer.Option(None, help="JSON file of option values"),
):
    """Runs the property suites; exits 3 when any check fails."""
    with lab_errors("verify"):
        selected = [s.strip() for item in (only or []) for s in item.split(",") if s.strip()]
        cfg = build_config(
            "verify",
            config,
            {"only": [], "break_tilt_formula": False},
            {
                "only": selected or None,
                "break_tilt_formula": break_tilt_formula or None,
                "seed": seed,
                "workers": workers,
                "output_dir": str(output_dir) if output_dir else None,
            },
        )
        opts = cfg.model_dump()
        pipeline = VerificationPipeline(cfg.seed, cfg.workers, mass_scale=1.5 if opts["break_tilt_formula"] else 1.0)
        report = pipeline.run(opts["only"] or None)
        render_summary(report)
        path = store_for(cfg).write_json("verify.json", report)
        emit({"artifact": str(path), **report})
        ensure_passed(report)
