"""Simulation and ML-DIP reconstruction of real-time volumetric cardiac MRI."""

from ._mldip import (  # noqa: F401
    AcquisitionConfig,
    BaselinesConfig,
    ConfigError,
    ContractError,
    DivergenceError,
    EvalConfig,
    ExperimentConfig,
    FormatError,
    GatingConfig,
    Grid,
    InsufficientDataError,
    ModelConfig,
    PhantomConfig,
    PreprocessConfig,
    TrainMode,
    config_echo,
    generate_phantom,
    infer,
    load_config,
    parse_config,
    psnr,
    read_dvs,
    read_dvs_labels,
    run_experiment,
    sha256_file,
    ssim,
    sweep_scan_time,
    train,
    volume_curve,
    write_dvs,
    xt_profile,
    zero_filled,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
