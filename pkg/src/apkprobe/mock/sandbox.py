"""Behavioral simulation of a dynamic-analysis sandbox.

The sandbox never executes bytecode. It interprets the behavior descriptor
string embedded by the dynamic-loading transform and performs the observable
protocol: URL probing of non-descriptor strings, a startup ping when the app
is launched, and trigger-gated payload downloads that are then handed to
static engines. This keeps the measurable surface (tracking entries, verdict
flips) while staying a desk-scale simulation.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Optional

from ..errors import ValidationError
from ..transforms import TRIGGERS, parse_behavior_descriptor

URL_RE = re.compile(r"https?://[^\s\"'<>|]+")

PROBE_USER_AGENT = "URLProbe/1.0"
DEFAULT_APP_USER_AGENT = "Dalvik/2.1.0 (Linux; U; Android 10; SandboxDevice)"


@dataclass(frozen=True)
class SandboxProfile:
    name: str = "default"
    enabled_actions: frozenset = frozenset()
    network_allowed: bool = True
    budget: int = 64
    fires_launch: bool = True
    user_agent: str = DEFAULT_APP_USER_AGENT

    def __post_init__(self):
        if self.budget <= 0:
            raise ValidationError("sandbox budget must be positive")

    @classmethod
    def from_dict(cls, name: str, obj: dict) -> "SandboxProfile":
        actions = set()
        for trig in obj.get("triggers", ()):
            if trig in TRIGGERS:
                actions.add(TRIGGERS[trig].action)
            else:
                actions.add(trig)
        return cls(name=name,
                   enabled_actions=frozenset(actions),
                   network_allowed=obj.get("network", True),
                   budget=obj.get("budget", 64),
                   fires_launch=obj.get("fires_launch", True),
                   user_agent=obj.get("user_agent", DEFAULT_APP_USER_AGENT))


@dataclass
class SandboxRun:
    malicious: bool = False
    label: Optional[str] = None
    events: list = field(default_factory=list)


def trigger_latency(action: str) -> float:
    """Deterministic simulated seconds between event injection and reaction."""
    return ((zlib.crc32(action.encode()) % 1450) + 50) / 100.0


def run_sandbox(strings, profile: SandboxProfile, payload_scanner,
                tracker, source: str = "sandbox-1") -> SandboxRun:
    """Drive one app through the sandbox protocol.

    ``strings`` are the app's instruction-referenced string constants;
    ``payload_scanner`` is a callable bytes -> bool (malicious) used on any
    downloaded payload.
    """
    run = SandboxRun()
    budget = profile.budget

    def spend() -> bool:
        nonlocal budget
        if budget <= 0:
            run.events.append({"kind": "budget-exhausted"})
            return False
        budget -= 1
        return True

    descriptor = None
    probe_urls = []
    for text in strings:
        parsed = parse_behavior_descriptor(text)
        if parsed is not None:
            if descriptor is None:
                descriptor = parsed
            continue
        probe_urls.extend(URL_RE.findall(text))

    # Static URL checking happens without executing the app.
    for url in probe_urls:
        if not spend():
            return run
        tracker.visit(url, source, PROBE_USER_AGENT)
        run.events.append({"kind": "static-probe", "url": url})

    if descriptor is None:
        return run

    launched = False
    if profile.fires_launch:
        if not spend():
            return run
        tracker.visit(descriptor["ping"], source, profile.user_agent)
        run.events.append({"kind": "ping", "url": descriptor["ping"]})
        launched = True

    action = descriptor["trigger"]
    if action is None:
        fires = launched
        latency = 0.0
    else:
        fires = action in profile.enabled_actions
        latency = trigger_latency(action)

    if not fires:
        return run

    if not profile.network_allowed:
        run.events.append({"kind": "blocked", "url": descriptor["get"],
                           "trigger": action})
        return run

    if not spend():
        return run
    payload = tracker.fetch(descriptor["get"], source, profile.user_agent)
    run.events.append({"kind": "download", "url": descriptor["get"],
                       "trigger": action, "latency": latency,
                       "payload_bytes": len(payload) if payload else 0})
    if payload is not None and payload_scanner(payload):
        run.malicious = True
        run.label = "Dropper.Dyn"
    return run
