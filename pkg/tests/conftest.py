import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from gravos.detector.model import ArchConfig  # noqa: E402
from gravos.scene import Box3D, Scene  # noqa: E402
from gravos.voxelizer import GridSpec  # noqa: E402

SMALL_ARCH = ArchConfig(point_hidden=4, feature=4, context=3, head_hidden=5, ctx_stride=2, ctx_radius=1, ctx_in=2)
UNIT_GRID = GridSpec(origin=(0.0, 0.0, 0.0), cell=(1.0, 1.0, 1.0), extent=((0.0, 8.0), (0.0, 8.0), (0.0, 4.0)))


def random_small_scene(rng, n_voxels=6, max_pts=3, scene_id="tiny"):
    """A handful of occupied unit cells with 1..max_pts jittered points each, plus one Car box."""
    cells = set()
    while len(cells) < n_voxels:
        cells.add((int(rng.integers(0, 6)), int(rng.integers(0, 6)), int(rng.integers(0, 3))))
    pts = []
    for c in sorted(cells):
        for _ in range(int(rng.integers(1, max_pts + 1))):
            xyz = np.array(c) + rng.uniform(0.1, 0.9, 3)
            pts.append([*xyz, rng.uniform(0, 1)])
    box = Box3D(3.0, 3.0, 1.5, 4.0, 3.0, 3.0, float(rng.uniform(-0.5, 0.5)), "Car")
    return Scene(scene_id, np.array(pts), (box,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_experiment(seed=0, **overrides):
    """A pipeline configuration that runs end to end in a few seconds."""
    from gravos.config import DatasetConfig, ExperimentConfig, FinetuneConfig
    from gravos.detector.train import TrainConfig
    from gravos.scene import SynthConfig

    extent = ((0.0, 16.0), (-8.0, 8.0), (-3.0, 1.0))
    synth = SynthConfig(class_counts={"Car": 2, "Pedestrian": 1, "Cyclist": 1}, background_point_count=200,
                        points_per_object_range=(20, 40), scene_extent=extent)
    base = dict(
        dataset=DatasetConfig(n_train=4, n_eval=3, synth=synth),
        grid=GridSpec(origin=(0.0, -8.0, -3.0), cell=(0.5, 0.5, 0.5), extent=extent),
        detector=SMALL_ARCH,
        pretrain=TrainConfig(epochs=3, early_epoch=1),
        finetune=FinetuneConfig(phase1_epochs=1, phase2_epochs=1),
        seed=seed,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS):
        terminalreporter.write_line(line)
