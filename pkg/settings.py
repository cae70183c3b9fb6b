from dotenv import load_dotenv
import os

# A .env file is optional; every setting has a default.
_flag = load_dotenv()

APP_NAME = "goodhart-tails"
APP_VERSION = "0.1.0"

OUTPUT_DIR = os.getenv("GOODHART_OUTPUT_DIR", "results")
LOG_LEVEL = os.getenv("GOODHART_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("GOODHART_SEED", "20240601"))
QUAD_EPSREL = float(os.getenv("GOODHART_QUAD_EPSREL", "1e-9"))
MAX_TRAJECTORIES = int(float(os.getenv("GOODHART_MAX_TRAJECTORIES", "1e7")))
WORKERS = int(os.getenv("GOODHART_WORKERS", "1"))
