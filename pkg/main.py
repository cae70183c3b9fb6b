import typer

from settings import APP_NAME, APP_VERSION
from utils.logger import get_logger, set_global_level

from routes.tilt import router as tilt_router
from routes.condition import router as condition_router
from routes.mdp import router as mdp_router
from routes.tails import router as tails_router
from routes.kl import router as kl_router
from routes.verify import router as verify_router

logger = get_logger(__name__)

app = typer.Typer(name=APP_NAME, help="Heavy-tailed KL regularization and catastrophic Goodhart lab.", no_args_is_help=True)


def _version(value: bool):
    if value:
        typer.echo(f"{APP_NAME} {APP_VERSION}")
        raise typer.Exit()


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging on stderr"),
    version: bool = typer.Option(False, "--version", callback=_version, is_eager=True, help="Show version and exit"),
):
    if verbose:
        set_global_level("DEBUG")
        logger.debug("verbose logging enabled")


app.add_typer(tilt_router)
app.add_typer(condition_router)
app.add_typer(mdp_router)
app.add_typer(tails_router)
app.add_typer(kl_router)
app.add_typer(verify_router)


if __name__ == "__main__":
    app()
