"""Smoke test for the `modelslice` Python extension.

Build the extension first:

    cargo build --release -p modelslice-py

then run `python3 python/smoke_test.py`. If `modelslice` is not installed,
the freshly built shared library under target/ is loaded directly.
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_modelslice():
    try:
        return importlib.import_module("modelslice")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libmodelslice_py.so"
        if lib.exists():
            staging = Path(tempfile.mkdtemp(prefix="modelslice-py-"))
            shutil.copy(lib, staging / "modelslice.so")
            sys.path.insert(0, str(staging))
            return importlib.import_module("modelslice")
    sys.exit("modelslice extension not found; run: cargo build --release -p modelslice-py")


ms = import_modelslice()
QUARTERS = [0.25, 0.5, 0.75, 1.0]


def check(name, condition):
    print(("PASS " if condition else "FAIL ") + name)
    if not condition:
        sys.exit(1)


check("slice_boundary", ms.slice_boundary(64, 8, 0.5) == 32 and ms.slice_boundary(640, 16, 0.375) == 240)

vgg = ms.Model.preset("vgg13")
check("vgg13 params", abs(vgg.params(1.0) - 9.42e6) / 9.42e6 <= 0.02)
check("vgg13 flops", abs(vgg.flops(1.0) - 1022.5e6) / 1022.5e6 <= 0.01)
report = vgg.cost_report(0.5)
check("cost report totals", report["total_flops"] == sum(r["flops"] for r in report["rows"]))

check("budget", ms.max_rate_for_budget(0.3, 1.0, QUARTERS) == 0.5)
check("choose_rate", ms.choose_rate(25) == 1.0 and ms.choose_rate(400) == 0.5 and ms.choose_rate(0) is None)

sim = ms.simulate()
rates = [e["rate"] for e in sim["events"]]
check("burst simulation", rates == [1.0] * 10 + [0.25] * 4 + [1.0] * 6 and sim["summary"]["violations"] == 0)

probs = ms.scheme_probabilities("r-weighted-3", QUARTERS)
check("weighted probabilities", probs == [0.25, 0.125, 0.125, 0.5])
draws = ms.draw_rates("r-min-max", QUARTERS, 1, 200)
check("r-min-max keeps both ends", all(1.0 in d and 0.25 in d for d in draws))

stages = ms.cascade([0.5, 1.0], [[0, 1, 1, 0], [0, 1, 0, 0]], [0, 1, 1, 1])
recalls = [s["aggregate_recall"] for s in stages]
check("cascade recall nonincreasing", recalls == sorted(recalls, reverse=True))
check("inclusion", ms.inclusion_coefficient([1, 2, 3, 4], [2, 3]) == 0.5)

config = ms.preset_config("spirals").replace("epochs = 60", "epochs = 20")
model, metrics = ms.train(config)
final = [m for m in metrics if m["epoch"] == 20]
check("training metrics per rate", len(final) == 4)
check("trained subnets accurate", all(m["accuracy"] >= 0.9 for m in final))

points = [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]]
direct = model.predict(points, 0.75)
widened = model.widen(points, 0.5, 0.75, "exact")
deviation = max(abs(a - b) for ra, rb in zip(direct, widened["logits"]) for a, b in zip(ra, rb))
check("exact widening", deviation <= 1e-10)
approx = model.widen(points, 0.5, 0.75, "approx")
check("approx widening is cheaper", approx["flops"] < widened["flops"])

with tempfile.TemporaryDirectory() as tmp:
    model.save(tmp + "/ckpt")
    back = ms.Model.load(tmp + "/ckpt")
    check("checkpoint round trip", back.predict(points, 0.25) == model.predict(points, 0.25))
    path = ms.gen_data("charlm", 3, 64, tmp)
    check("gen_data", Path(path).read_text().strip().isalpha())

evaluation = model.evaluate("spirals", 7, 200, 1.0)
check("evaluate", 0.0 <= evaluation["accuracy"] <= 1.0 and math.isfinite(evaluation["loss"]))

lm = ms.Model.preset("charlm")
logits = lm.predict_tokens([[0, 1, 2], [3, 4, 5]], 0.5)
check("token model", len(logits) == 6)

try:
    ms.slice_boundary(64, 8, 1.5)
    check("bad rate raises", False)
except ms.ConfigError:
    check("bad rate raises", True)
try:
    ms.Model.load("/nonexistent/checkpoint")
    check("missing checkpoint raises", False)
except ms.DataError:
    check("missing checkpoint raises", True)

print("all smoke checks passed")
