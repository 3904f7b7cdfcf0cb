"""Brute-force check of the greedy placement rule.

An instance is one app with up to five bubbles and up to five nodes in the
device's zone. Some nodes are held by a stronger user and refuse
permission. The oracle enumerates every bubble-to-host assignment and keeps
the one with the lowest total latency, breaking ties by the
lexicographically smallest tuple of host ids. The simulator's first map
version must agree with it.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass

from .controller import TimerConfig
from .model import CANONICAL_CAPABILITIES, AppManifest, BubbleSpec, NodeProfile, qualifies
from .scenario.format import DeviceDecl, ScenarioEvent, ScenarioFile
from .simnet import World

MAX_NODES = 5
MAX_BUBBLES = 5


@dataclass(frozen=True)
class OracleInstance:
    nodes: tuple[NodeProfile, ...]
    bubbles: tuple[BubbleSpec, ...]
    refusing: frozenset[str]
    source: str = "phone"

    def scenario(self) -> ScenarioFile:
        """All nodes share the device's zone; refusals come from t=0 claims."""
        sc = ScenarioFile(zones=["here"])
        sc.nodes = {n.node_id: n for n in self.nodes}
        sc.devices = {self.source: DeviceDecl(self.source, "here", "owner", 1)}
        sc.apps = {"app": AppManifest("app", self.source, self.bubbles)}
        sc.events = [ScenarioEvent(0, "claim", ("rival", n, "9")) for n in sorted(self.refusing)]
        return sc


def random_instance(seed: int, max_nodes: int = MAX_NODES, max_bubbles: int = MAX_BUBBLES) -> OracleInstance:
    if not (1 <= max_nodes <= MAX_NODES and 1 <= max_bubbles <= MAX_BUBBLES):
        raise ValueError(f"oracle bounds are 1..{MAX_NODES} nodes and 1..{MAX_BUBBLES} bubbles")
    rng = random.Random(f"oracle:{seed}")
    caps = CANONICAL_CAPABILITIES
    nodes = tuple(
        NodeProfile(f"n{i}", "here", frozenset(rng.sample(caps, rng.randint(1, len(caps)))),
                    rng.randint(0, 4))
        for i in range(rng.randint(1, max_nodes))
    )
    bubbles = tuple(
        BubbleSpec(f"b{j}", frozenset(rng.sample(caps, rng.choice((1, 1, 2)))))
        for j in range(rng.randint(1, max_bubbles))
    )
    refusing = frozenset(n.node_id for n in nodes if rng.random() < 0.25)
    return OracleInstance(nodes, bubbles, refusing)


def exhaustive(inst: OracleInstance) -> tuple[str, ...]:
    """Minimum total latency over the full product of per-bubble domains."""
    lat = {n.node_id: n.link_latency_ms for n in inst.nodes}
    lat[inst.source] = 0
    domains = []
    for b in inst.bubbles:
        feasible = [n.node_id for n in inst.nodes
                    if n.node_id not in inst.refusing and qualifies(n.capabilities, b.requirements)]
        domains.append(feasible or [inst.source])
    best = None
    for combo in itertools.product(*domains):
        key = (sum(lat[h] for h in combo), combo)
        if best is None or key < best:
            best = key
    return best[1]


def simulated(inst: OracleInstance) -> tuple[str, ...]:
    """Run the protocol until C0 sequences its first map; report that placement."""
    world = World(inst.scenario(), seed=0, config=TimerConfig())
    while world.queue and not (world.c0 and world.c0["app"].map.version >= 1):
        world.step()
    m = world.c0["app"].map
    return tuple(m.host_of(b.bubble_id) for b in inst.bubbles)


def compare(seed: int, max_nodes: int = MAX_NODES, max_bubbles: int = MAX_BUBBLES):
    """Returns ``(instance, expected, actual)`` for one seed."""
    inst = random_instance(seed, max_nodes, max_bubbles)
    return inst, exhaustive(inst), simulated(inst)
