from pathlib import Path

import typer

from database.schema.models import MdpInstance
from lib.distributions import make_distribution
from lib.mdp import (
    Dmrmdp,
    Policy,
    assign_band_returns,
    enumerate_trajectories,
    expected_return,
    goodhart_policy_search,
    kl_chain_rule,
    lift_policy,
    merge_chain,
    token_chain,
    total_variation,
    upweight_trajectories,
)
from utils.cli import build_config, emit, lab_errors, store_for
from utils.errors import InvalidParameterError
from utils.logger import get_logger

logger = get_logger(__name__)
router = typer.Typer()

GENERATORS = ("token-chain", "merge-chain")


def _load_instance(path: Path, store) -> tuple[Dmrmdp, Policy]:
    if not path.is_file():
        raise InvalidParameterError("instance", str(path), "file not found")
    instance = MdpInstance.model_validate(store.read_json(path))
    mdp = Dmrmdp.from_instance(instance)
    policy = Policy.from_dict(mdp, instance.base_policy) if instance.base_policy else Policy.uniform(mdp)
    logger.info(f"loaded DMRMDP from {path}: {len(mdp.states)} states, {len(mdp.sinks)} sinks")
    return mdp, policy


def _generate(opts: dict) -> tuple[Dmrmdp, Policy]:
    match opts["generate"]:
        case "token-chain":
            mdp = token_chain(alphabet=opts["alphabet"], max_length=opts["depth"])
        case "merge-chain":
            mdp = merge_chain(n_actions=opts["alphabet"], depth=opts["depth"])
        case other:
            raise InvalidParameterError("generate", other, f"expected one of {', '.join(GENERATORS)}")
    policy = Policy.uniform(mdp)
    mdp = assign_band_returns(mdp, policy, make_distribution(opts["returns"]), opts["atoms"], opts["seed"])
    return mdp, policy


@router.command("mdp-demo")
def mdp_demo(
    instance: Path = typer.Option(None, help="MdpInstance JSON file"),
    generate: str = typer.Option(None, help="token-chain or merge-chain when no instance is given"),
    alphabet: int = typer.Option(None, help="Actions per state for generated instances"),
    depth: int = typer.Option(None, help="Maximum trajectory length for generated instances"),
    returns: str = typer.Option(None, help="Return law discretized onto generated sinks"),
    atoms: int = typer.Option(None, help="Atoms per sink return"),
    target_mean: float = typer.Option(None, help="Mean return to beat"),
    kl_budget: float = typer.Option(None, help="Per-state average KL budget"),
    write_instance: Path = typer.Option(None, help="Save the instance used as JSON"),
    seed: int = typer.Option(None, help="Seed for tie-breaking sink bands"),
    output_dir: Path = typer.Option(None, help="Directory for artifacts"),
    config: Path = typer.Option(None, help="JSON file of option values"),
):
    """Upweight the trajectory measure, lift it to a policy, and report return and KL."""
    with lab_errors("mdp-demo"):
        cfg = build_config(
            "mdp-demo",
            config,
            {
                "instance": None,
                "generate": "token-chain",
                "alphabet": 3,
                "depth": 5,
                "returns": "pareto:1.5",
                "atoms": 64,
                "target_mean": 5.0,
                "kl_budget": 0.1,
            },
            {
                "instance": str(instance) if instance else None,
                "generate": generate,
                "alphabet": alphabet,
                "depth": depth,
                "returns": returns,
                "atoms": atoms,
                "target_mean": target_mean,
                "kl_budget": kl_budget,
                "seed": seed,
                "output_dir": str(output_dir) if output_dir else None,
            },
        )
        opts = cfg.model_dump()
        store = store_for(cfg)
        if opts["instance"]:
            mdp, policy = _load_instance(Path(opts["instance"]), store)
        else:
            mdp, policy = _generate(opts)
        if write_instance is not None:
            write_instance.parent.mkdir(parents=True, exist_ok=True)
            write_instance.write_text(mdp.to_instance(policy).model_dump_json(indent=2) + "\n", encoding="utf-8")
            logger.info(f"wrote instance to {write_instance}")

        base = enumerate_trajectories(mdp, policy)
        search = goodhart_policy_search(mdp, policy, opts["target_mean"], opts["kl_budget"])
        table_path = store.write_csv("mdp_search.csv", search.table)

        round_trip = total_variation(enumerate_trajectories(mdp, lift_policy(mdp, base, policy)), base)
        summary = {
            "artifact": str(table_path),
            "trajectories": len(base),
            "base_mean_return": expected_return(mdp, base),
            "found": search.found,
            "lift_round_trip_tv": round_trip,
        }
        if search.found is not None:
            found = search.found
            rho = upweight_trajectories(mdp, base, found["c"], found["t"])
            lifted = enumerate_trajectories(mdp, lift_policy(mdp, rho, policy))
            summary["kl_chain_rule"] = kl_chain_rule(mdp, lifted, base)
        store.write_json("mdp_summary.json", summary)
        emit(summary)
