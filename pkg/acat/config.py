"""
Configuration constants and settings for the ACAT pipeline.

Every constant can be overridden from the environment (or a .env file) so
that a run can be tuned without touching the JSON run config.
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

# Directory constants
DEFAULT_OUTPUT_DIR = os.getenv("ACAT_OUTPUT_DIR", "runs/default")
DATA_DIR = "data"
REPORTS_DIR = "reports"
SAMPLES_DIR = "samples"

# Artifact file names
MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"
STAGE_RECORD_FILE = "stage.json"
TRAINING_LOG_FILE = "training_log.csv"
EVAL_REPORT_FILE = "eval_report.csv"
EVAL_SUMMARY_FILE = "eval_summary.json"
ABLATION_REPORT_FILE = "ablation_report.csv"
ACCEPTANCE_REPORT_FILE = "acceptance.json"
RUN_CONFIG_FILE = "config.json"

# Numerics
DEFAULT_DTYPE = os.getenv("ACAT_DTYPE", "float32")
PROBABILITY_EPSILON = float(os.getenv("ACAT_PROBABILITY_EPSILON", "1e-7"))
GRADCHECK_STEP = float(os.getenv("ACAT_GRADCHECK_STEP", "1e-3"))
GRADCHECK_TOLERANCE = float(os.getenv("ACAT_GRADCHECK_TOLERANCE", "1e-4"))

# Training defaults
DEFAULT_BATCH_SIZE = int(os.getenv("ACAT_BATCH_SIZE", "8"))
DEFAULT_LEARNING_RATE = float(os.getenv("ACAT_LEARNING_RATE", "1e-3"))
DEFAULT_LEAKY_SLOPE = 0.01

# Counterfactual search defaults
DEFAULT_CF_STEPS = 20
DEFAULT_CF_STEP_SIZE = 1.0
DEFAULT_CF_ALPHA = 100.0
LATENT_SHIFT_START = 1e-5
LATENT_SHIFT_COUNT = 20

# Attribution defaults
IG_STEPS = 32

# Evaluation defaults
DEFAULT_NOISE_SIGMA = 1.0
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

# Execution
DEFAULT_THREADS = int(os.getenv("ACAT_THREADS", "1"))
LOG_LEVEL = os.getenv("ACAT_LOG_LEVEL", "INFO")

# Version string stamped into stage records
PIPELINE_VERSION = "1.0.0"


# Logging configuration
def setup_logging(level: str = None):
    """Configure logging for the application."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    return logging.getLogger(__name__)
