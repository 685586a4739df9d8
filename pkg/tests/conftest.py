import numpy as np
import pytest

from headmem.numerics import default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    """CLI subcommands set the process-wide dtype; keep tests independent."""
    before = default_dtype()
    yield
    set_default_dtype("f64" if before == np.float64 else "f32")
