"""contactworld: desk-scale tooling for contact-rich world-model pipelines.

Modules:
    splat       contact-force splat rendering (compiled kernel + fallback)
    excitation  Ornstein-Uhlenbeck joystick excitation and integration
    tokens      factorized vocabularies, FSQ, masking, iterative decoding
    dynamics    toy spatial-temporal transformer forward pass and losses
    dataset     episode archive packing/loading and concatenated views
    gate        collision gate: prompt, judges, rejection/retreat loop
    cli         `contactworld` command-line entry point
"""

__version__ = "0.1.0"

__all__ = ["splat", "excitation", "tokens", "dynamics", "dataset", "gate"]
