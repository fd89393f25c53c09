"""Constants for the refusion-desk toolkit."""
from __future__ import annotations

DOMAIN = "refusion_desk"

# Special token ids shared by the synthetic task, the model and the concat path
CLS_TOKEN_ID = 0
MASK_TOKEN_ID = 1
SEP_TOKEN_ID = 2
SPECIAL_TOKEN_IDS = (CLS_TOKEN_ID, MASK_TOKEN_ID, SEP_TOKEN_ID)
FIRST_LABEL_TOKEN_ID = 3

# Numerics
LAYER_NORM_EPS = 1e-5
FINITE_DIFF_STEP = 1e-6

# Model defaults (desk scale)
DEFAULT_NUM_LAYERS = 2
DEFAULT_HIDDEN = 32
DEFAULT_HEADS = 2
DEFAULT_VOCAB_SIZE = 512
DEFAULT_MAX_LEN = 64
DEFAULT_FFN_MULT = 4
DEFAULT_INIT_STD = 0.02

# Fusion parameter initialisation
BETA_RAMP_STEP = 0.1
DEFAULT_TAU_START = 1.0
DEFAULT_TAU_END = 0.1

# Retrieval / training defaults (desk scale)
DEFAULT_K = 8
DEFAULT_BATCH_SIZE = 16
DEFAULT_LR_WEIGHTS = 1e-3
DEFAULT_LR_ARCH = 3e-3
DEFAULT_STEPS = 400
DEFAULT_SEARCH_FRACTION = 0.5
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_EVAL_INTERVAL = 50
DEFAULT_SEEDS = (13, 21, 42, 87, 100)

# Full-scale reference settings (RoBERTa-large runs); documented, not used at desk scale
REFERENCE_K = 64
REFERENCE_BATCH_SIZE = 32
REFERENCE_LR = 1e-5
REFERENCE_MAX_STEPS = 1000
REFERENCE_MAX_LEN = 128
REFERENCE_SHOTS_PER_CLASS = 16

# Synthetic task defaults
DEFAULT_NUM_CLASSES = 4
DEFAULT_SHOTS = 16
DEFAULT_VAL_SHOTS = 16
DEFAULT_TEST_PER_CLASS = 64
DEFAULT_POOL_EXTRA_PER_CLASS = 48
DEFAULT_BODY_LEN = 5
DEFAULT_CLUSTER_SIZE = 100
DEFAULT_NOISE_RATE = 0.5
DEFAULT_CLUSTER_NOISE = 0.1
DEFAULT_NOISE_TOKEN_SCALE = 0.2
DEFAULT_ENCODER_NORM = 8.0
DEFAULT_PURITY = 0.8
DEFAULT_VOTE_K = 8

# Vector store binary format
STORE_MAGIC = b"RFVS"
STORE_VERSION = 1
STORE_NO_PAYLOAD = -1

# Checkpoint binary format
CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1

# FLOP cost table (a multiply-add counts as 2)
FLOPS_PER_MULTIPLY_ADD = 2
LAYER_NORM_FLOPS_PER_ELEMENT = 8
SOFTMAX_FLOPS_PER_ELEMENT = 5
GELU_FLOPS_PER_ELEMENT = 8
RERANKER_SOFTMAX_FLOPS_PER_RETRIEVAL = 5
ORDERED_MASK_FLOPS_PER_UNIT = 5

# Latency measurement
LATENCY_WARMUP_RUNS = 5
LATENCY_MIN_SAMPLES = 30

# Output layout
CONFIG_ECHO_FILE = "config.conf"
RESULTS_JSON_FILE = "results.json"
RESULTS_CSV_FILE = "results.csv"
SWEEP_CSV_FILE = "sweep.csv"
FLOPS_CSV_FILE = "flops.csv"
FLOPS_PLOT_FILE = "flops_plot.json"
SEED_DIR_TEMPLATE = "seed-{seed}"
METRICS_LOG_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.rfck"
STORE_FILE = "store.rfvs"
TASK_FILE = "task.json"
ARCH_FILE = "arch.txt"
EVAL_FILE = "eval.json"
LATENCY_FILE = "latency.json"

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_PARTIAL_FAILURE = 2
