from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StepResult:
    """One transition: per-agent observations and rewards plus episode status.

    ``info`` always carries ``active`` (agents that acted this step) and
    ``agent_done`` (agents whose trajectory ends here); ``success`` appears
    on the terminal step.
    """

    observations: np.ndarray
    rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)
