from .config import ExperimentConfig, load_config
from .dataset import generate_dataset, load_records, synchronize, verify_dataset
from .experiment import (MetricsBundle, compare_methods, confusion_matrix, export_pgm,
                         run_experiment)
from .iqc import CaptureRecord, read_capture, write_capture

__all__ = ["ExperimentConfig", "load_config", "generate_dataset", "load_records", "synchronize",
           "verify_dataset", "MetricsBundle", "compare_methods", "confusion_matrix", "export_pgm",
           "run_experiment", "CaptureRecord", "read_capture", "write_capture"]
