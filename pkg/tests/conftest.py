import pytest

TINY_TOML = """
schema_version = 1
run_dir = "{run_dir}"

[train]
total_epochs = 2
batch_size = 8
data_workers = 1
lr_decay_epochs = [1]

[teacher]
preset = "tiny-teacher"

[student]
preset = "tiny"

[data]
num_classes = 3
resolution = 8
n_per_class = 8
n_test_per_class = 4
crop_padding = 1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML.format(run_dir=(tmp_path / "run").as_posix()))
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = [line for mod in list(sys.modules.values())
             for line in getattr(mod, "ACCEPTANCE_REPORT", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
