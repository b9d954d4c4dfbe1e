import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from timebin_certify import ChannelMap, FrameConfig


@pytest.fixture(scope="session")
def channels():
    return ChannelMap.default()


@pytest.fixture()
def cfg540():
    return FrameConfig(delta_t=540)


@pytest.fixture()
def cfg2700():
    return FrameConfig(delta_t=2700)
