import os
import json
from pathlib import Path

# Anwendungspfade
APP_ROOT = Path(__file__).parent.parent.absolute()
LOGS_DIR = os.path.join(APP_ROOT, 'logs')
LOG_DIR = LOGS_DIR  # Alias
LOG_FILE = os.path.join(LOGS_DIR, 'system.log')
EVENTS_FILE = os.path.join(LOGS_DIR, 'events.json')
DEFAULT_OUTPUT_DIR = os.path.join(APP_ROOT, 'results')

# Log-Konfiguration
LOG_LEVEL = "INFO"  # DEBUG, INFO, WARNING, ERROR, CRITICAL
LOG_TIMEZONE = "UTC"
MAX_LOG_ENTRIES = 1000

# === linalg ===
JACOBI_OFF_DIAGONAL_TOL = 1e-12  # relative to ||A||_F
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-10
SPECTRUM_NEGATIVE_TOL = 1e-12
EFFECTIVE_RANK_CEIL_EPS = 1e-9

# === nnet ===
DEFAULT_HIDDEN_DIMS = [64, 32]
DEFAULT_ACTIVATION = "tanh"
CHECKPOINT_FORMAT_VERSION = 1
KL_TARGET_FLOOR = 1e-12

# === datagen (desk scale) ===
DEFAULT_NUM_CLASSES = 5
DEFAULT_SUBCLASSES_PER_CLASS = 2
DEFAULT_DIM = 16
DEFAULT_N_PER_SUBCLASS = 200
DEFAULT_SPREAD = 1.1
TRAIN_FRACTION = 0.8

# Backdoor
DEFAULT_TRIGGER_DIMS = [0, 1, 2]
DEFAULT_TRIGGER_VALUE = 4.0
DEFAULT_TARGET_LABEL = 1
DEFAULT_POISON_FRACTION = 0.1

# === Training des Originalmodells ===
TRAIN_EPOCHS = 50
TRAIN_BATCH_SIZE = 32
TRAIN_LEARNING_RATE = 0.1
TRAIN_LR_DECAY = 0.998
TRAIN_WEIGHT_DECAY = 1e-3

# === Unlearning ===
UNLEARN_ALPHA = 0.1
UNLEARN_BETA = 0.01
UNLEARN_LEARNING_RATE = 1e-3
UNLEARN_ITERATIONS = 200
UNLEARN_BATCH_SIZE = 32
UNLEARN_K_LAYERS = 2

# Lernraten der Vergleichsmethoden im Standard-Experiment
# NegGrad aus {1e-4, 1e-5}, alle anderen aus {1e-1 ... 1e-4}
DEFAULT_METHODS = ["muda", "ft", "neggrad", "neggrad_ft", "eu_k", "cf_k", "ft_classifier_only"]
DEFAULT_METHOD_LEARNING_RATES = {
    "muda": 0.1,
    "muda_da_only": 0.1,
    "muda_sd_only": 0.1,
    "ft": 0.1,
    "neggrad": 1e-4,
    "neggrad_ft": 1e-2,
    "eu_k": 0.1,
    "cf_k": 0.1,
    "ft_classifier_only": 0.1,
    "retrain": TRAIN_LEARNING_RATE,
}

# === metrics ===
PROBE_STEPS = 500
PROBE_LEARNING_RATE = 0.1
KMEANS_MAX_ITER = 300
MIA_STEPS = 1000
MIA_LEARNING_RATE = 0.5

# === harness ===
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
STABILITY_SAMPLE_EVERY = 25
STABILITY_MULTIPLIERS = [1, 5]

# Lade benutzerdefinierte Konfiguration wenn vorhanden
CONFIG_FILE = os.path.join(APP_ROOT, 'config.json')


def load_config():
    """Lädt benutzerdefinierte Konfiguration aus config.json wenn vorhanden"""
    global LOG_LEVEL, LOG_TIMEZONE, MAX_LOG_ENTRIES, DEFAULT_OUTPUT_DIR

    if os.path.exists(CONFIG_FILE):
        try:
            with open(CONFIG_FILE, 'r') as f:
                config = json.load(f)

            LOG_LEVEL = config.get('log_level', LOG_LEVEL)
            LOG_TIMEZONE = config.get('log_timezone', LOG_TIMEZONE)
            MAX_LOG_ENTRIES = int(config.get('max_log_entries', MAX_LOG_ENTRIES))
            DEFAULT_OUTPUT_DIR = config.get('output_dir', DEFAULT_OUTPUT_DIR)

        except Exception:
            # Fehler beim Laden ignorieren und Standard-Werte verwenden
            pass


load_config()

__all__ = [var for var in dir() if not var.startswith('__') and var.isupper()]
