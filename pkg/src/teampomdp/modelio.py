"""JSON model files.

Schema (all ids are strings; probabilities are decimal numbers):

{
  "name": "bind1",
  "num_agents": 1,
  "states": ["s0"],
  "common_obs": ["c0"],
  "private_obs": [["x"]],
  "actions": [["a0", "a1"]],
  "transition": {"s0": {"a0": [[["s0", ["c0", "x"]], 1.0]], ...}},
  "cost_c": {"s0": {"a0": 0.0, ...}},
  "cost_d": {"s0": {"a0": [1.0], ...}},
  "initial": [[["s0", ["c0", "x"]], 1.0]],
  "discount": 0.5,
  "kappa": [1.0],
  "slater": {"policy": "always:a1", "zeta": 1.0}   // optional
}

Joint actions are keyed by the agent actions joined with ",".
"""

from __future__ import annotations

import json

from .model import ModelSpec

__all__ = ["model_to_dict", "model_from_dict", "save_model", "load_model"]

_SEP = ","


def _action_key(a: tuple) -> str:
    return _SEP.join(a)


def _parse_action(key: str, num_agents: int) -> tuple:
    parts = tuple(key.split(_SEP))
    if len(parts) != num_agents:
        raise ValueError(f"joint-action key {key!r} does not name {num_agents} actions")
    return parts


def model_to_dict(model: ModelSpec) -> dict:
    transition = {}
    cost_c = {}
    cost_d = {}
    for s in model.states:
        transition[s] = {}
        cost_c[s] = {}
        cost_d[s] = {}
        for a in model.joint_actions():
            key = _action_key(a)
            transition[s][key] = [[[s2, list(o2)], p] for (s2, o2), p in model.transition[(s, a)]]
            cost_c[s][key] = model.cost_c[(s, a)]
            cost_d[s][key] = list(model.cost_d[(s, a)])
    doc = {
        "name": model.name,
        "num_agents": model.num_agents,
        "states": list(model.states),
        "common_obs": list(model.common_obs),
        "private_obs": [list(o) for o in model.private_obs],
        "actions": [list(a) for a in model.actions],
        "transition": transition,
        "cost_c": cost_c,
        "cost_d": cost_d,
        "initial": [[[s, list(o)], p] for (s, o), p in model.initial],
        "discount": model.discount,
        "kappa": list(model.kappa),
    }
    if model.slater:
        doc["slater"] = dict(model.slater)
    return doc


def model_from_dict(doc: dict) -> ModelSpec:
    num_agents = int(doc["num_agents"])
    transition = {}
    cost_c = {}
    cost_d = {}
    for s, rows in doc["transition"].items():
        for key, entries in rows.items():
            a = _parse_action(key, num_agents)
            transition[(s, a)] = [((e[0][0], tuple(e[0][1])), float(e[1])) for e in entries]
    for s, rows in doc["cost_c"].items():
        for key, value in rows.items():
            cost_c[(s, _parse_action(key, num_agents))] = float(value)
    for s, rows in doc["cost_d"].items():
        for key, value in rows.items():
            cost_d[(s, _parse_action(key, num_agents))] = tuple(float(x) for x in value)
    return ModelSpec(
        num_agents=num_agents,
        states=doc["states"],
        common_obs=doc["common_obs"],
        private_obs=doc["private_obs"],
        actions=doc["actions"],
        transition=transition,
        cost_c=cost_c,
        cost_d=cost_d,
        initial=[((e[0][0], tuple(e[0][1])), float(e[1])) for e in doc["initial"]],
        discount=float(doc["discount"]),
        kappa=doc["kappa"],
        name=doc.get("name", ""),
        slater=doc.get("slater"),
    )


def save_model(model: ModelSpec, path: str):
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=1)


def load_model(path: str) -> ModelSpec:
    with open(path) as f:
        return model_from_dict(json.load(f))
