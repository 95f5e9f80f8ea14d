"""Zero-shot panoptic segmentation lab: Python surface over the C++ core.

The heavy lifting (autodiff, Hungarian matching, the staged training loops,
panoptic metrics) lives in the compiled ``_concatlab`` extension; this package
re-exports its operations and adds small JSON conveniences.
"""

import json as _json

from ._concatlab import (
    CoreError,
    default_config,
    focal_loss,
    generate_dataset,
    harmonic,
    hungarian,
    kl,
    mask_loss,
    mmd,
    run_pipeline,
)

__all__ = [
    "CoreError",
    "default_config",
    "default_config_dict",
    "focal_loss",
    "generate_dataset",
    "harmonic",
    "hungarian",
    "kl",
    "mask_loss",
    "mmd",
    "run_pipeline",
    "run_pipeline_dict",
]


def default_config_dict():
    """Default run configuration as a Python dict."""
    return _json.loads(default_config())


def run_pipeline_dict(config):
    """Run the staged pipeline for ``config`` (dict or JSON text).

    Returns the metrics report as a dict with keys ``sPQ``, ``uPQ``, ``hPQ``,
    ``sIoU``, ``uIoU``, ``hIoU`` and ``per_category``.
    """
    text = config if isinstance(config, str) else _json.dumps(config)
    return _json.loads(run_pipeline(text))
