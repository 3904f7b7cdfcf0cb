"""Run a scenario through the simulator."""

from __future__ import annotations

from ..controller import TimerConfig
from ..simnet import World
from ..trace import TraceEvent
from .format import ScenarioFile


def run(scenario: ScenarioFile, seed: int = 0, config: TimerConfig | None = None) -> list[TraceEvent]:
    """Simulate to quiescence (or the cutoff) and return the trace."""
    return World(scenario, seed, config).run()
