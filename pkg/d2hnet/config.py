"""
Configuration constants for the D2HNet restoration pipeline.
"""
import os

# Paths
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUTPUT_DIR = os.getenv("D2H_OUTPUT_DIR", os.path.join(BASE_DIR, 'outputs'))
MANIFEST_NAME = "manifest.tsv"
VAL_MANIFEST_NAME = "manifest_val.tsv"
LOSS_LOG_NAME = "loss.log"
REPORT_NAME = "report.tsv"

# Runtime
LOG_LEVEL = os.getenv("D2H_LOG_LEVEL", "INFO")
THREADS = int(os.getenv("D2H_THREADS", "1"))
DEFAULT_SEED = 0

# Exposure synthesis
DEFAULT_INTERP_FACTOR = 8
DEFAULT_LONG_FRAMES = 64
DEFAULT_SHORT_FRAMES = 8
DEFAULT_GAP_FRAMES = 8
DEFAULT_EXPOSURE_RATIO = 8
DEFAULT_SOURCE_FPS = 60.0
DEFAULT_WINDOW_STRIDE = 10      # source frames between window starts
DEFAULT_BURST_COUNT = 4
DEFAULT_VAL_FRACTION = 0.0

# ISP
DEFAULT_GAMMA = 2.2
WB_RED_RANGE = (1.9, 2.4)
WB_BLUE_RANGE = (1.5, 1.9)

# Noise (signal-referred, values in [0, 1])
DEFAULT_K_ISO = 1.0e-5
DEFAULT_READ_R0 = 1.0e-3
DEFAULT_READ_R1 = 2.0e-6
DEFAULT_ROW_R0 = 0.0
DEFAULT_ROW_R1 = 5.0e-7
DEFAULT_BIT_DEPTH = 10
DEFAULT_BLACK_LEVEL = 0.0
ISO_LONG_RANGE = (1000.0, 4000.0)
ISO_SHORT_RANGE = (6400.0, 12800.0)
ISO_SENSOR_RANGE = (100.0, 12800.0)
POISSON_NORMAL_THRESHOLD = 1000.0  # x/K above this uses the normal approximation

# Augmentation
P_ILLUMINATION = 0.3
P_COLOR = 0.5
P_CUTNOISE = 0.3
IA_GAMMAS = (1 / 0.6, 1 / 0.7, 1 / 0.75, 1 / 0.8, 1 / 0.9)
CA_A_RANGE = (0.3, 0.6)
CA_B_RANGE = (0.001, 0.01)
IA_EPSILON = 1e-8
CUTNOISE_RATIO = 120 / 256       # square side relative to the crop side
DEFAULT_CROP_SIZE = 64
VARMAP_WINDOW = 8
VARMAP_EPSILON = 1e-8
SELECTION_PERCENTILE = 5.0
SAMPLES_PER_MAP = 1000
SELECTION_SQUARE = 64
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Model
DEBLUR_BASE_WIDTH = 32
ENHANCE_BASE_WIDTH = 16
DEBLUR_RESOLUTION = 256
TRAIN_DOWNSAMPLE = 2             # alpha = 1 / TRAIN_DOWNSAMPLE
LEAKY_SLOPE = 0.2
RESIDUAL_LAYERS = 4
PYRAMID_LEVELS = 5

# Training
DEBLUR_EPOCHS = 2
ENHANCE_EPOCHS = 2
DEBLUR_LR = 1e-4
ENHANCE_LR = 5e-5
LR_HALVING_PERIOD = 1
BATCH_SIZE = 2
ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LOSS_SMOOTHING = 20

# Evaluation
PSNR_PEAK = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRIC_DOMAIN = "float[0,1]"

# Checkpoint / tensor file formats
D2T_MAGIC = b"D2T1"
CHECKPOINT_MAGIC = b"D2CK"
CHECKPOINT_VERSION = 1

# Ablation settings (each may be combined with the others)
ABLATION_FLAGS = (
    "only-long",
    "only-short",
    "long-short-l_last-gt",
    "dense-alignment",
    "no-skip-fusion",
    "no-tail-block",
    "deblur-only",
    "no-varmap-selection",
    "no-illumination-adjust",
    "no-color-adjust",
    "no-cutnoise",
    "no-deblur-downsample",
)
