import os
import sys

if "--deterministic" in sys.argv[1:]:
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"

from sgmquant.cli import main  # noqa: E402

sys.exit(main())
