"""Dense RF-EMF exposure maps from sparse point sensors.

Reconstruction methods: exact kernel regression with a convolutional
tangent kernel, its EigenPro-preconditioned iterative variant for high
resolution grids, and a finite-width generative baseline trained on
observed pixels only.
"""

from .cntk import (
    CntkConfig,
    KernelBlock,
    cntk_layer,
    compute_kernel,
    dilate_pixels,
    dual_activation,
    dual_derivative,
    pixel_covariance,
)
from .errors import ExpomapError
from .evaluate import (
    EvalConfig,
    SeriesReport,
    TimingReport,
    evaluate_series,
    reconstruct_pixels,
    rmse,
    time_run,
)
from .glip import (
    AdamState,
    GlipNet,
    TrainTrace,
    adam_step,
    backward,
    forward,
    init_net,
    masked_loss,
    reconstruct,
    train,
)
from .grid import (
    BuildingMask,
    ExposureMap,
    GridSpec,
    ObservationGrid,
    SensorReading,
    UNITS_NORMALIZED,
    UNITS_VPM,
    apply_building_mask,
    latlon_to_pixel,
    pixel_to_latlon,
    rasterize_readings,
)
from .ingest import (
    CleaningReport,
    NormParams,
    bin_snapshots,
    clean_readings,
    denormalize,
    fit_norm,
    normalize,
    parse_sensor_csv,
    rasterize_buildings,
)
from .priors import PriorImage, build_lip, build_rnp
from .solver import (
    Preconditioner,
    SolveState,
    build_preconditioner,
    eigenpro_solve,
    predict,
    solve_exact,
)
from .synth import SourceSpec, generate_field, sample_sensors

__version__ = "0.1.0"
