"""
Runtime settings for the activation codec.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# ---------------------------------------------------------------------------
# Paths & env
# ---------------------------------------------------------------------------
BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")

# ---------------------------------------------------------------------------
# Reproducibility & parallelism
# ---------------------------------------------------------------------------
SEED = int(os.environ.get("ACTCODEC_SEED", "0"))

THREADS = max(1, int(os.environ.get("ACTCODEC_THREADS", "1")))

# ---------------------------------------------------------------------------
# Codec defaults
# ---------------------------------------------------------------------------
# Clip = c * sigma of the highest-variance transform channel.
CLIP_MULTIPLIER = float(os.environ.get("ACTCODEC_CLIP_MULTIPLIER", "4.0"))

ALLOCATION_MODE = os.environ.get("ACTCODEC_ALLOCATION_MODE", "waterfill")

CODEBOOK_SCOPE = os.environ.get("ACTCODEC_CODEBOOK_SCOPE", "coefficient")

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
LOG_LEVEL = os.environ.get("ACTCODEC_LOG_LEVEL", "WARNING").upper()
