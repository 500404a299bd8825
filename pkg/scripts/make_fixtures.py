"""Author the scripted-backend fixture sets by running the case studies in record mode.

A rule-based author answers each prompt the way the case studies need; every
answer is stored under ``<set>/<Role>/<digest>.txt`` so that later runs with
the scripted backend replay it exactly.

    python3 scripts/make_fixtures.py [--out src/riskadapt/data/fixtures]
"""

from __future__ import annotations

import argparse
import json
import re
import shutil
from pathlib import Path

from riskadapt import bench
from riskadapt.core import dump_plan, plan_from_dict
from riskadapt.llm import Completion, LlmPipeline
from riskadapt.llm.prompts import RenderedPrompt

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_OUT = ROOT / "src" / "riskadapt" / "data" / "fixtures"

NAIVE_FORCE = 2.5


def _fixed(v: float) -> dict:
    return {"value": v, "lower": v, "upper": v}


def robot_plan(theta_f: float) -> dict:
    return {
        "subtasks": [
            {"index": 1,
             "reward": {"template": "QuadraticTracking", "args": {"target": "theta_box", "state_index": 0}},
             "constraints": [],
             "params": {"theta_box": _fixed(0.5)},
             "window": 20,
             "terminal": {"kind": "StateWithinTolerance",
                          "args": {"state_index": 0, "target": "theta_box", "tol": 0.01}}},
            {"index": 2,
             "reward": {"template": "VelocityTracking", "args": {"target": "v_push"}},
             "constraints": [{"template": "ForceLimit", "args": {"threshold": "theta_f", "object": "box"},
                              "latent": False}],
             "params": {"v_push": _fixed(0.5),
                        "theta_f": {"value": theta_f, "lower": 0.0, "upper": 20.0},
                        "theta_d": _fixed(1.5)},
             "window": 40,
             "terminal": {"kind": "StateWithinTolerance",
                          "args": {"state_index": 0, "target": "theta_d", "tol": 0.03}}},
        ],
        "whole_task_done": {"kind": "StateWithinTolerance",
                            "args": {"state_index": 0, "target": "s2.theta_d", "tol": 0.03}},
    }


def vehicle_plan(target: float, station: float, hints: list[dict]) -> dict:
    latent, params = [], {"v_cruise": _fixed(9.5), "v_max": _fixed(10.0), "d_min": _fixed(3.0),
                          "p_clear": _fixed(station + 6.0)}
    for h in hints:
        name = re.sub(r"[^a-z]+", "_", h["object"].lower()).strip("_")
        if h["template"] == "SpeedLimit":
            params[f"v_{name}"] = _fixed(h["threshold"])
            latent.append({"template": "SpeedLimit", "args": {"threshold": f"v_{name}", "object": h["object"]},
                           "latent": True})
        else:
            params[f"d_{name}"] = _fixed(h["threshold"])
            latent.append({"template": "MinDistance", "args": {"object": h["object"], "threshold": f"d_{name}"},
                           "latent": True})
    return {
        "subtasks": [
            {"index": 1,
             "reward": {"template": "VelocityTracking", "args": {"target": "v_cruise"}},
             "constraints": [{"template": "SpeedLimit", "args": {"threshold": "v_max"}, "latent": False},
                             {"template": "MinDistance", "args": {"object": "any", "threshold": "d_min"},
                              "latent": False}] + latent,
             "params": params,
             "window": 150,
             "terminal": {"kind": "StateWithinTolerance",
                          "args": {"state_index": 0, "target": "p_clear", "tol": 1.0}}},
            {"index": 2,
             "reward": {"template": "VelocityTracking", "args": {"target": "v_cruise"}},
             "constraints": [{"template": "SpeedLimit", "args": {"threshold": "v_max"}, "latent": False},
                             {"template": "MinDistance", "args": {"object": "any", "threshold": "d_min"},
                              "latent": False}],
             "params": {"v_cruise": _fixed(9.5), "v_max": _fixed(10.0), "d_min": _fixed(3.0),
                        "x_goal": _fixed(target)},
             "window": 50,
             "terminal": {"kind": "StateWithinTolerance",
                          "args": {"state_index": 0, "target": "x_goal", "tol": 1.0}}},
        ],
        "whole_task_done": {"kind": "StateWithinTolerance",
                            "args": {"state_index": 0, "target": "s2.x_goal", "tol": 1.0}},
    }


class Author:
    """Answers prompts; ``force_steps`` is the sequence of force limits the corrector proposes."""

    def __init__(self, force_steps: tuple[float, ...]):
        self.force_steps = force_steps

    def answer(self, p: RenderedPrompt) -> str:
        return getattr(self, p.role.lower())(p.slots)

    def latentobject(self, s) -> str:
        scene = s["scene"].lower()
        objects = []
        if "school bus" in scene:
            objects.append({"object": "children", "probability": "High",
                            "rationale": "a stopped school bus with hazard lights usually means children "
                                         "are getting off, hidden behind the bus"})
            objects.append({"object": "school bus", "probability": "Low",
                            "rationale": "the bus is stopped and unlikely to pull out while loading"})
        if "teenager" in scene:
            objects.append({"object": "teenagers", "probability": "Medium",
                            "rationale": "distracted pedestrians next to the curb may step onto the road"})
        if "adult" in scene:
            objects.append({"object": "adults", "probability": "Low",
                            "rationale": "they walk parallel to the road and pay attention to traffic"})
        return json.dumps({"objects": objects}, indent=2)

    def riskhandling(self, s) -> str:
        objs = json.loads(s["assessment"])["objects"]
        risky = [o["object"] for o in objs if o["probability"] in ("High", "Medium")]
        if risky:
            names = " and ".join(risky)
            text = (f"Slow down to at most 4 m/s before reaching the {names} and keep at least 6 m "
                    f"from them if they step onto the road; resume normal speed once past.")
            hints = []
            for o in risky:
                hints.append({"template": "SpeedLimit", "object": o, "threshold": 4.0})
                hints.append({"template": "MinDistance", "object": o, "threshold": 6.0})
        elif objs:
            text = "No object is likely to become a risk; keep a constant speed."
            hints = []
        else:
            text = "No latent risks identified."
            hints = []
        return json.dumps({"solution": text, "hints": hints}, indent=2)

    def coder(self, s) -> str:
        if "push the box" in s["instruction"]:
            if s["current_plan"] == "none":
                doc = robot_plan(NAIVE_FORCE)
            else:
                doc = json.loads(s["current_plan"])
                m = re.search(r"theta_f of subtask 2 to ([0-9.]+)", s["guidance"])
                if m:
                    doc["subtasks"][1]["params"]["theta_f"]["value"] = float(m.group(1))
            return dump_plan(plan_from_dict(doc))
        target = float(re.search(r"destination is ([0-9.]+) m ahead", s["scene"]).group(1))
        m = re.search(r"about ([0-9.]+) m ahead", s["scene"])
        station = float(m.group(1)) if m else target / 2
        return dump_plan(plan_from_dict(vehicle_plan(target, station, json.loads(s["hints"]))))

    def correction(self, s) -> str:
        plan = json.loads(s["plan"])
        theta = plan["subtasks"][1]["params"]["theta_f"]["value"]
        for step in self.force_steps:
            if theta < step - 1e-9:
                return json.dumps({
                    "command": f"the box accelerates too slowly because the contact force is capped; "
                               f"raise the force limit theta_f of subtask 2 to {step} N",
                    "subtasks": [2],
                    "seeds": {"s2.theta_f": step},
                }, indent=2)
        return json.dumps({"command": "no change", "subtasks": [], "seeds": {}}, indent=2)


class RecordingBackend:
    name = "record"

    def __init__(self, author: Author, out: Path):
        self.author = author
        self.out = out
        self.written = 0

    def complete(self, prompt: RenderedPrompt) -> Completion:
        path = self.out / prompt.role / f"{prompt.digest}.txt"
        text = self.author.answer(prompt)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text + "\n", encoding="utf-8")
            self.written += 1
        return Completion(path.read_text(encoding="utf-8"))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--skip-robot", action="store_true")
    args = ap.parse_args()
    sets = {
        "robot": (Author((6.0,)), ("Full", "SgdOnly")),
        "robot-llm-only": (Author((3.0, 4.5)), ("LlmOnly",)),
    }
    if not args.skip_robot:
        for name, (author, variants) in sets.items():
            out = args.out / name
            shutil.rmtree(out, ignore_errors=True)
            backend = RecordingBackend(author, out)
            for variant in variants:
                res = bench.run_robot_case(bench.RobotCaseConfig(), variant, LlmPipeline(backend))
                print(f"{name}/{variant}: evals-to-band {res.evaluations_to_band}, final {res.final_loss:.6g}, "
                      f"optimum {res.optimum_loss:.6g}, converged {res.converged}")
            print(f"{name}: {backend.written} fixtures")
    out = args.out / "vehicle"
    shutil.rmtree(out, ignore_errors=True)
    backend = RecordingBackend(Author(()), out)
    bench.prepare_vehicle_plans(LlmPipeline(backend), bench.VEHICLE_SCENARIOS)
    print(f"vehicle: {backend.written} fixtures")


if __name__ == "__main__":
    main()
