import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_DIR = Path(os.environ.get("MNIST_DIR", "/root/data/mnist"))


@pytest.fixture(scope="session")
def mnist_dir():
    from dpconsensus.idx import find_mnist

    if set(find_mnist(MNIST_DIR)) != {"train", "test"}:
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return MNIST_DIR
