"""Run one configured experiment and write its manifest."""

import datetime as _dt
import os
import traceback
from importlib import metadata
from pathlib import Path

from .config import DEFAULT_SEED, ExperimentConfig
from .experiments import REGISTRY, Context
from .manifest import Manifest

SEED_ENV = "VPFP_SEED"


class ExperimentFailed(RuntimeError):
    """An experiment raised; ``manifest`` is the partial manifest written for it."""

    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


def toolkit_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def resolve_seed(cfg: ExperimentConfig, cli_seed=None, environ=None, config_has_seed=True):
    """Seed precedence: ``--seed``, then ``VPFP_SEED``, then the config file, then the default."""
    environ = os.environ if environ is None else environ
    if cli_seed is not None:
        return int(cli_seed), "cli"
    raw = environ.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            seed = int(raw, 0)
        except ValueError:
            raise ValueError(f"{SEED_ENV}={raw!r} is not an integer") from None
        if not 0 <= seed < 2**64:
            raise ValueError(f"{SEED_ENV} must lie in [0, 2^64)")
        return seed, "env"
    if config_has_seed:
        return cfg.seed, "config"
    return DEFAULT_SEED, "default"


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs=1, seed_source="config") -> Manifest:
    """Execute ``cfg.experiment`` and write ``manifest.json`` atomically in ``out_dir``.

    A failure inside the experiment leaves a manifest with status ``failed``
    and the checks gathered so far, then raises :class:`ExperimentFailed`.
    """
    if cfg.experiment not in REGISTRY:
        raise ValueError(f"unknown experiment {cfg.experiment!r}")
    out = Path(out_dir or cfg.out or f"runs/{cfg.experiment}")
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, jobs)
    man = Manifest(cfg.experiment, toolkit_version(), cfg.echo(), cfg.seed, seed_source, ctx.jobs, out_dir=str(out))
    man.timing["start"] = _now()
    # replaces any manifest of an earlier run, so a killed run is never read as complete
    man.write(out)
    try:
        REGISTRY[cfg.experiment].body(ctx)
    except Exception as err:
        stage = f"criterion {ctx.failed_at}" if ctx.failed_at is not None else "setup"
        man.status = "failed"
        man.error = f"{cfg.experiment} ({stage}): {type(err).__name__}: {err}"
        _finish(man, ctx)
        man.timing["traceback"] = traceback.format_exc()
        man.write(out)
        raise ExperimentFailed(man.error, man) from err
    man.status = "complete"
    _finish(man, ctx)
    man.write(out)
    return man


def _finish(man, ctx):
    man.checks = list(ctx.checks)
    man.fits = dict(ctx.fits)
    man.artifacts = list(ctx.artifacts)
    man.timing["end"] = _now()
    man.timing["seconds"] = {k: round(v, 3) for k, v in ctx.timing.items()}
