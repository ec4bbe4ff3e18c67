import os
import shutil
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest


def have_cc():
    return any(shutil.which(c) for c in ("cc", "gcc", "clang"))


needs_cc = pytest.mark.skipif(not have_cc(), reason="no C toolchain found")
