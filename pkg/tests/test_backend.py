import os
import subprocess
import sys

import pytest

from pkn import _backend


def test_selected_backend_is_available():
    assert _backend.NAME in _backend.available()
    assert _backend.get(_backend.NAME) is _backend.impl


def test_unknown_backend():
    with pytest.raises(ValueError):
        _backend.get("fortran")


def test_env_forces_fallback():
    env = dict(os.environ, PKN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from pkn import _backend; print(_backend.NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_compiled_backend_preferred_when_built():
    if "cython" not in _backend.available():
        pytest.skip("compiled backend not built")
    if os.environ.get("PKN_PURE_PYTHON"):
        pytest.skip("fallback forced")
    assert _backend.NAME == "cython"
