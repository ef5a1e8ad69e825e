"""Flow matching over coordinate-value sets (images, point clouds) with a spatially aware perceiver."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    INRFlowError,
    SamplingError,
    SingularityError,
    TrainingError,
)
from .fields import DatasetSpec, FieldSample, FourierEmbeddingConfig, generate_dataset, grid_coords
from .interpolant import T_MAX, forward_interpolate, make_interpolant_batch, target_velocity
from .metrics import MetricReport, chamfer_sq, cov, emd_exact, evaluate_sets, mmd, one_nna
from .model import INRFlow, ModelConfig
from .sampling import (
    SamplerConfig,
    Trajectory,
    cfg_velocity,
    grid_subsample,
    sample,
    sample_ode,
    sample_resolution_agnostic,
    sample_sde,
)
from .training import (
    TrainConfig,
    TrainState,
    cicfm_loss,
    create_train_state,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    train_step,
)

__version__ = "0.1.0"
