import json
import pytest

from nvmux.core import CameraModel, NVSite
from nvmux.photonstats import PoissonMixture


collect_ignore = ["setup.py", "main.py"]


@pytest.fixture
def charge_mixture():
    return PoissonMixture(1.6, 6.7, 0.7)


@pytest.fixture
def four_sites():
    return [
        NVSite(1, 12, 12),
        NVSite(2, 28, 12),
        NVSite(3, 12, 28),
        NVSite(4, 28, 28, opposite=True),
    ]


@pytest.fixture
def camera():
    return CameraModel()


@pytest.fixture
def tmp_config(tmp_path):
    """Write a config dict to a JSON file under tmp_path and return its path.
    The output directory defaults to tmp_path/out."""
    def write(data, name='config.json'):
        data = dict(data)
        data.setdefault('output', {'dir': str(tmp_path / 'out')})
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path
    return write
