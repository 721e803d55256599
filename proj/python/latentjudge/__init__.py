"""Latent-draft trajectory safety judge: Python bindings over the C++ core.

The heavy lifting (tensor math, training, the verification suites) lives in
the compiled `_core` module; this package re-exports its surface and adds a
console entry point mirroring the native CLI.
"""

from ._core import (
    LatentJudgeError,
    bayes_posterior,
    generate_corpus,
    metrics_from_confusion,
    run_cli,
    softmax_rows,
    verify_theory,
)

__all__ = [
    "LatentJudgeError",
    "bayes_posterior",
    "generate_corpus",
    "metrics_from_confusion",
    "run_cli",
    "softmax_rows",
    "verify_theory",
    "main",
]


def main() -> int:
    import sys

    return run_cli(sys.argv[1:])
