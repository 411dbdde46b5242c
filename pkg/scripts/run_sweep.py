"""Train one model per ensemble-coefficient group and print the table.

    python3 scripts/run_sweep.py --out runs/sweep [--data DIR] [--preset tiny] [--set train.epochs=5]

Extra arguments go straight to ``cect sweep``.
"""
import sys

from cect.cli import run
from cect.reporting import read_csv


def main(argv):
    if "--out" not in argv:
        argv = [*argv, "--out", "runs/sweep"]
    if not any(a.startswith("--preset") or a.startswith("--config") for a in argv):
        argv = [*argv, "--preset", "tiny"]
    code = run(["sweep", *argv])
    try:
        header, rows = read_csv(f"{argv[argv.index('--out') + 1]}/sweep.csv")
    except OSError:
        return code
    print("  ".join(f"{h:>7}" for h in header))
    for row in rows:
        print("  ".join(f"{row[h]:>7.3f}" if isinstance(row[h], float) else f"{'undefined' if row[h] is None else row[h]!s:>7}" for h in header))
    return code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
