"""Part-affinity distillation at desk scale.

Aggregates cross-attention into part affinity maps, fits a small radiance
field over them, and runs attention-modulated score distillation against
pluggable guidance models. Everything is numpy + stdlib and deterministic
under fixed seeds.
"""

__version__ = "0.1.0"
