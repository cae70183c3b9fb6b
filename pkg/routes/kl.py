from pathlib import Path

import typer

from database.schema.models import MixtureKlInput
from lib.distributions import make_distribution
from lib.tilting import mixture_kl
from utils.cli import build_config, emit, lab_errors, store_for
from utils.logger import get_logger

logger = get_logger(__name__)
router = typer.Typer()


@router.command("kl-calc")
def kl_calc(
    alpha: float = typer.Option(None, help="Probability of emitting the rare high-reward output"),
    log_q: float = typer.Option(None, "--log-q", help="Log base probability of that output"),
    delta_reward: float = typer.Option(None, help="Reward gain of the rare output"),
    base: str = typer.Option(None, help="Reward law for the conditioning comparison"),
    output_dir: Path = typer.Option(None, help="Directory for artifacts"),
    config: Path = typer.Option(None, help="JSON file of option values"),
):
    """KL of mixing probability alpha onto a single output of base probability q."""
    with lab_errors("kl-calc"):
        cfg = build_config(
            "kl-calc",
            config,
            {"alpha": 0.01, "log_q": -1339.70, "delta_reward": 0.0, "base": None},
            {
                "alpha": alpha,
                "log_q": log_q,
                "delta_reward": delta_reward,
                "base": base,
                "output_dir": str(output_dir) if output_dir else None,
            },
        )
        opts = cfg.model_dump()
        inp = MixtureKlInput(alpha=opts["alpha"], log_q=opts["log_q"], delta_reward=opts["delta_reward"])
        result = mixture_kl(inp, make_distribution(opts["base"]) if opts["base"] else None)
        path = store_for(cfg).write_json("kl_calc.json", result)
        emit({"artifact": str(path), **result})
