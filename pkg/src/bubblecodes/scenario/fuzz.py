"""Random scenario generator for invariant fuzzing."""

from __future__ import annotations

import random

from ..model import CANONICAL_CAPABILITIES, LISTEN_MODES, AppManifest, BubbleSpec, NodeProfile
from .format import DeviceDecl, ScenarioEvent, ScenarioFile

EVENT_WEIGHTS = {
    "move": 6,
    "fail": 3,
    "recover": 3,
    "claim": 2,
    "release": 1,
    "context": 2,
    "complete": 1,
    "retract": 1,
    "send": 2,
}
USERS = ("alice", "bob", "carol")


def _caps(rng: random.Random) -> frozenset[str]:
    k = rng.randint(1, len(CANONICAL_CAPABILITIES))
    return frozenset(rng.sample(CANONICAL_CAPABILITIES, k))


def fuzz_generate(seed: int, max_nodes: int = 6, max_bubbles: int = 4, max_events: int = 80,
                  mean_gap_ms: int = 400) -> ScenarioFile:
    """Build a valid random scenario; the same arguments give the same scenario."""
    if min(max_nodes, max_bubbles, max_events) < 1:
        raise ValueError("fuzz bounds must be positive")
    rng = random.Random(f"scenario:{seed}")
    sc = ScenarioFile()
    sc.zones = [f"z{i}" for i in range(rng.randint(1, 3))]
    for i in range(rng.randint(1, max_nodes)):
        nid = f"n{i}"
        sc.nodes[nid] = NodeProfile(nid, rng.choice(sc.zones), _caps(rng), rng.randint(0, 6))
    n_apps = 1 if max_bubbles < 2 else rng.choice((1, 1, 2))
    total = rng.randint(n_apps, max_bubbles)
    counts = [total] if n_apps == 1 else [(k := rng.randint(1, total - 1)), total - k]
    for a, count in enumerate(counts):
        dev = f"d{a}"
        sc.devices[dev] = DeviceDecl(dev, rng.choice(sc.zones), USERS[a], rng.randint(1, 6))
        bubbles = tuple(
            BubbleSpec(f"b{j}", _caps(rng) if rng.random() < 0.3 else frozenset({rng.choice(CANONICAL_CAPABILITIES)}),
                       listen_mode=rng.choice(LISTEN_MODES))
            for j in range(count)
        )
        sc.apps[f"a{a}"] = AppManifest(f"a{a}", dev, bubbles)

    kinds, weights = zip(*EVENT_WEIGHTS.items())
    nodes, devices, apps = sorted(sc.nodes), sorted(sc.devices), sorted(sc.apps)
    at = 0
    for _ in range(rng.randint(1, max_events)):
        at += int(rng.expovariate(1 / mean_gap_ms)) if rng.random() < 0.85 else 0
        kind = rng.choices(kinds, weights)[0]
        app = rng.choice(apps)
        bubble_ids = sc.apps[app].bubble_ids
        if kind == "move":
            args = (rng.choice(devices), rng.choice(sc.zones))
        elif kind in ("fail", "recover"):
            args = (rng.choice(nodes),)
        elif kind == "claim":
            args = (rng.choice(USERS), rng.choice(nodes), str(rng.randint(0, 9)))
        elif kind == "release":
            args = (rng.choice(USERS), rng.choice(nodes))
        elif kind == "context":
            args = (app, rng.choice(("volume", "brightness", "mode")), str(rng.randint(0, 99)))
        elif kind in ("complete", "retract"):
            args = (app, rng.choice(bubble_ids))
        else:
            args = (app, rng.choice(bubble_ids), rng.choice(bubble_ids), f"p{rng.randint(0, 999)}")
        via = kind == "complete" and rng.random() < 0.3
        sc.events.append(ScenarioEvent(at, kind, args, via))
    return sc
