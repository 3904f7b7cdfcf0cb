from .format import EVENT_ARITY, DeviceDecl, ScenarioError, ScenarioEvent, ScenarioFile, format_scenario, parse_scenario
from .runner import run
