import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_world():
    from glus.dataset import WorldConfig, generate_world

    return generate_world(WorldConfig(num_videos=4, frames_per_video=6, canvas_size=64, seed=3))
