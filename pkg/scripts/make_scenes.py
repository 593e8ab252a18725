"""Regenerate the bundled oracle scene fixtures (deterministic)."""

import json
import math
import random
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "spatial_tts" / "data" / "scenes"

OBJECTS = [
    ("chair", "red"), ("lamp", "gold"), ("plant", "green"), ("box", "orange"),
    ("sofa", "navy"), ("table", "brown"), ("mug", "purple"), ("clock", "black"),
    ("vase", "teal"), ("bike", "crimson"), ("shelf", "olive"), ("ball", "magenta"),
]


def rot_y(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), 0, math.sin(t)], [0, 1, 0], [-math.sin(t), 0, math.cos(t)]])


def make(i: int) -> dict:
    rng = random.Random(1000 + i)
    yaw = rng.uniform(-180, 180)
    R = rot_y(yaw)
    t = np.array([rng.uniform(-2, 2), 0.0, rng.uniform(-2, 2)])
    picks = rng.sample(OBJECTS, rng.randint(3, 5))
    # first object hidden but reachable: depth-1 reveal for most scenes, depth-2 only for every fourth
    sign = rng.choice([-1, 1])
    hidden_bearing = sign * (rng.uniform(76, 96) if i % 4 == 3 else rng.uniform(50, 70))
    bearings = [hidden_bearing] + [rng.uniform(-40, 40) if k % 2 else rng.uniform(-150, 150) for k in range(1, len(picks))]
    objects = []
    for (name, color), b in zip(picks, bearings):
        r = rng.uniform(1.5, 5.0)
        c = np.array([-r * math.sin(math.radians(b)), rng.uniform(-0.3, 0.3), r * math.cos(math.radians(b))])
        w = R @ c + t
        objects.append({"name": name, "position": [round(float(x), 4) for x in w], "color": color})
    return {
        "name": f"scene_{i:02d}",
        "objects": objects,
        "camera_start": {"rotation": [float(x) for x in R.reshape(-1)], "translation": [float(x) for x in t]},
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for i in range(24):
        (OUT / f"scene_{i:02d}.json").write_text(json.dumps(make(i), indent=2) + "\n")
