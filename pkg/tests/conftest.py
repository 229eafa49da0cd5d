import os

# single-threaded BLAS for reproducible reductions; must precede the first numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from pathlib import Path  # noqa: E402

import pytest  # noqa: E402

MNIST_DIR = Path(os.environ.get("SGM_DATA_DIR", "/root/data/mnist"))
HAVE_MNIST = (MNIST_DIR / "t10k-images-idx3-ubyte").exists() or (MNIST_DIR / "t10k-images-idx3-ubyte.gz").exists()

needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason=f"MNIST not found under {MNIST_DIR}")

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
