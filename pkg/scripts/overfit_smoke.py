"""Memorize the 32-image synthetic set with the tiny preset.

    python3 scripts/overfit_smoke.py [--steps 200] [--seed 0]

Prints the train accuracy after the step budget. Augmentation is switched
off so every step sees the same pixels.
"""
import argparse
import tempfile
import time

from cect.config import load_config
from cect.data import ImageSet, synth_generate
from cect.evaluation import evaluate
from cect.model import CECT
from cect.training import fit, run_with_cap


def overfit(steps: int = 200, seed: int = 0, workdir=None):
    cfg = load_config(preset="tiny", overrides={"train.augment": False})
    r = cfg.model.input_resolution
    with tempfile.TemporaryDirectory() as tmp:
        manifest = synth_generate(cfg.data.synth_n // 2, r, seed, workdir or tmp)
        data = ImageSet(manifest, r, cfg.augment)
    model = CECT(cfg.model, seed)
    run = fit(model, data, data, run_with_cap(cfg.train, steps), seed)
    images, labels = data.batch(range(len(data)))
    return run, evaluate(model, images, labels, cfg.train.eval_batch_size)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.perf_counter()
    run, ev = overfit(args.steps, args.seed)
    print(f"steps {run.steps}  first loss {run.step_losses[0]:.4f}  last loss {run.step_losses[-1]:.4f}")
    print(f"train acc {ev.report.acc:.4f}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
