"""Train baseline and Model A on a small synthetic set and compare
outside-zone error on held-out scenes. Takes a few minutes on one core.

    python demos/02_train_toy.py [out_dir]
"""
import sys

from crosszone.experiments import run_protocol

out = sys.argv[1] if len(sys.argv) > 1 else "demo_runs"
res = run_protocol("zones8", out, n_train=200, n_test=50, epochs=3, modes=("baseline", "A"), seeds=(0,))
row = res["table"]["0"]
print(f"outside-zone REL  baseline {row['baseline']:.4f}  A {row['A']:.4f}  "
      f"({100 * row['improvement']['A']:.1f}% lower)")
