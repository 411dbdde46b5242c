"""Train on the synthetic set, then map penultimate features to 2-d.

    python3 scripts/embed_tsne.py --out runs/embed [--preset tiny] [--seed 0]

Writes the training artifacts plus embeddings.csv and tsne.csv, and prints
how well the two classes separate in the map (nearest-centroid accuracy).
"""
import sys

import numpy as np

from cect.cli import run
from cect.reporting import read_csv


def main(argv):
    if "--out" not in argv:
        argv = [*argv, "--out", "runs/embed"]
    if not any(a.startswith("--preset") or a.startswith("--config") for a in argv):
        argv = [*argv, "--preset", "tiny"]
    out = argv[argv.index("--out") + 1]
    code = run(["train", *argv]) or run(["embed", "--checkpoint", f"{out}/final.ckpt", *argv])
    if code:
        return code
    _, rows = read_csv(f"{out}/tsne.csv")
    pts = np.array([[r["x"], r["y"]] for r in rows])
    lab = np.array([r["label"] for r in rows])
    centroids = np.stack([pts[lab == k].mean(0) for k in (0, 1)])
    nearest = np.argmin(((pts[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    print(f"{len(rows)} points, nearest-centroid accuracy {(nearest == lab).mean():.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
