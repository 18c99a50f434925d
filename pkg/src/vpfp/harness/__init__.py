from .config import DEFAULT_SEED, ConfigError, ExperimentConfig, default_config, validate_config
from .experiments import CRITERIA, REGISTRY, RUNTIME_LIMITS, Context, Experiment
from .manifest import SCHEMA, Check, Manifest, ManifestError, emit_report
from .runner import SEED_ENV, ExperimentFailed, resolve_seed, run_experiment
