import os
import sys


def _thread_cap(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


def entry():
    # BLAS pools are sized when numpy loads, so the cap must land before the import
    cap = _thread_cap(sys.argv[1:])
    if cap is not None and cap.isdigit():
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap
    from cect.cli import main

    main()


if __name__ == "__main__":
    entry()
