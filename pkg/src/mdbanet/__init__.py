"""Two-branch multi-depth U-Net with Sobel boundary fusion for left-atrium and LA-scar segmentation."""

from .losses import LossBreakdown, cross_entropy, dice_score_soft, total_loss
from .metrics import (
    EvalResult,
    ScarSizeHistogram,
    aggregate_eval,
    dice_binary,
    evaluate_case,
    hausdorff_mm,
    scar_histogram,
)
from .network import (
    METHODS,
    BranchOutput,
    MDBANet,
    NetworkConfig,
    build_network,
    fuse_outputs,
    load_checkpoint,
    predict_case,
    save_checkpoint,
    sfm,
)
from .phantom import PhantomSpec, generate_phantom, oracle_connected_components, oracle_convolve3d
from .sobel import SobelKernelSet, SobelResponse, attention_map, make_sobel_kernels, sobel_response
from .training import TrainConfig, evaluate, lr_schedule, train, train_on_cases
from .volume_io import (
    DatasetManifest,
    LabelMap,
    Volume,
    load_case,
    normalize_intensity,
    pad_to_grid,
    read_manifest,
    split_dataset,
    write_manifest,
)

__version__ = "0.1.0"
