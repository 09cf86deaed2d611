import os

import pytest


@pytest.fixture(autouse=True)
def clean_adapter_env(monkeypatch):
    """Tests control the adapter environment; drop anything inherited."""
    for name in [k for k in os.environ if k.startswith("SCOMP_ADAPTER")]:
        monkeypatch.delenv(name)
