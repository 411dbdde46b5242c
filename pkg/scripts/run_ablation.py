"""Train the seven block/scale ablation rows and print accuracy per row.

    python3 scripts/run_ablation.py --out runs/ablation [--data DIR] [--preset tiny]

Extra arguments go straight to ``cect ablate``.
"""
import sys

from cect.cli import run
from cect.reporting import read_csv


def main(argv):
    if "--out" not in argv:
        argv = [*argv, "--out", "runs/ablation"]
    if not any(a.startswith("--preset") or a.startswith("--config") for a in argv):
        argv = [*argv, "--preset", "tiny"]
    code = run(["ablate", *argv])
    try:
        _, rows = read_csv(f"{argv[argv.index('--out') + 1]}/ablation.csv")
    except OSError:
        return code
    for row in rows:
        blocks = "+".join(b.upper() for b in ("ceb", "tdb", "tcb") if row[b])
        scales = ",".join(s[1:] for s in ("s28", "s56", "s112", "s224") if row[s])
        acc = "failed" if row["acc"] is None else f"{row['acc']:.4f}"
        print(f"{blocks:<12} {scales:<16} {acc}")
    return code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
