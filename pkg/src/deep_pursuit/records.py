from __future__ import annotations

import math
from dataclasses import dataclass, field

CSV_FIELDS = ("config_hash", "seed", "mode", "T", "epsilon", "epoch", "clean_acc", "robust_acc",
              "objective", "coherence", "frame_potential", "welch_bound", "wall_s")


@dataclass
class RunRecord:
    """One experiment output row; fields beyond :data:`CSV_FIELDS` stay in memory."""

    config_hash: str = ""
    seed: int = 0
    mode: str = ""
    T: int = 0
    epsilon: float = 0.0
    epoch: int = 0
    clean_acc: float = math.nan
    robust_acc: float = math.nan
    objective: float = math.nan
    coherence: float = math.nan
    frame_potential: float = math.nan
    welch_bound: float = math.nan
    wall_s: float = 0.0
    train_loss: float = math.nan
    train_acc: float = math.nan
    converged: bool = False
    objective_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)
