"""
Train a desk-scale model and compare it with the post-processing baseline
=========================================================================

Trains on the pinned 2,000-scene benchmark for a few minutes of CPU time (3,000 steps by default),
then scores three things on the 500 held-out scenes:

* the refined groups (final stage),
* the initial groups read before refinement,
* the PP baseline, which clusters the same individual heatmap peaks.

Usage: python demos/train_and_compare.py [steps] [out_dir]
"""

import sys
from pathlib import Path

from sharedattn.benchmark import DESK_STEPS, pinned_benchmark, run_benchmark
from sharedattn.plotting import save_refinement_panels
from sharedattn.sa_pipeline import predict

steps = int(sys.argv[1]) if len(sys.argv) > 1 else DESK_STEPS
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

train_scenes, test_scenes = pinned_benchmark()
result = run_benchmark(seed=0, steps=steps, data=(train_scenes, test_scenes))
print(f"{result.steps_run} steps in {result.train_seconds / 60:.1f} CPU minutes; "
      f"final loss {result.history[-1].total:.3f} (from {result.history[0].total:.3f})")
print(result.ours.to_text("refined"))
print(result.initial.to_text("initial"))
print(result.pp.to_text("pp"))

# side-by-side panels: groups before and after the argmax-feedback refinement
positives = [s for s in test_scenes if s.is_positive][:6]
initial, _ = predict(result.model, positives, stage="initial")
refined, _ = predict(result.model, positives)
for path in save_refinement_panels(positives, initial, refined, out):
    print("wrote", path)
