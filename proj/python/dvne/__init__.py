"""Text-driven editing of dynamic human-centric scenes.

Thin wrapper over the native ``_core`` extension. Arrays are float64 numpy
arrays; images are returned as (height, width, channels).
"""

from ._core import (
    Error,
    config_keys,
    contract,
    contract_jacobian,
    default_config,
    feature_l2_loss,
    nnfm_loss,
    normalize_config,
    photometric_loss,
    positional_encoding,
    read_frame,
    render_frame,
    run_checks,
    run_cli,
    synthesize,
    volume_render,
)

__all__ = [
    "Error",
    "config_keys",
    "contract",
    "contract_jacobian",
    "default_config",
    "feature_l2_loss",
    "nnfm_loss",
    "normalize_config",
    "photometric_loss",
    "positional_encoding",
    "read_frame",
    "render_frame",
    "run_checks",
    "run_cli",
    "synthesize",
    "volume_render",
    "main",
]


def main(argv=None):
    """Console entry point mirroring the ``dvne`` binary."""
    import sys

    code, out, err = run_cli(list(sys.argv[1:] if argv is None else argv))
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
