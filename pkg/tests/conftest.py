import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY_INI = """
[data]
root = {root}/data
image_size = 32
train_per_class = 6
val_per_class = 1
test_per_class = 3
target_pool = 4
target_test = 3
k_shot = 2

[backbone]
stages = 8x1,16x1
proj_dim = 16

[stage1]
epochs_train = 2
epochs_finetune = 1
classifier_epochs = 2
lr = 0.05
memory_budget = 3

[stage2]
epochs = 2
finetune_epochs = 1
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 2
memory_slots = 2
max_len = 8

[run]
out_dir = {root}/out
"""


def write_tiny_ini(root: Path) -> Path:
    path = Path(root) / "tiny.ini"
    path.write_text(TINY_INI.format(root=root))
    return path


@pytest.fixture
def tiny_ini(tmp_path):
    return write_tiny_ini(tmp_path)


@pytest.fixture
def tiny_cfg(tiny_ini):
    from cidacap.pipeline import ExperimentConfig
    return ExperimentConfig.load(tiny_ini)
