import numpy as np
import pytest

from rlvr_lab import policy as pol
from rlvr_lab.tasks import default_table


@pytest.fixture
def table():
    return default_table()


@pytest.fixture
def tiny_neural():
    """A perturbed small network (under 5k parameters) over the task vocabulary."""
    t = default_table()
    arch = pol.Arch("neural", vocab_size=len(t), max_len=16, embed_dim=12, n_layers=2,
                    hidden_dim=24, pad_id=t.pad_id, eos_id=t.eos_id)
    params = pol.init_params(arch, seed=3)
    params.values += np.random.default_rng(3).normal(0, 0.2, params.values.size)
    return params


def random_tabular(vocab=3, max_len=3, eos=0, seed=0, scale=1.0):
    arch = pol.Arch("tabular", vocab_size=vocab, max_len=max_len, eos_id=eos)
    params = pol.init_params(arch)
    params.values[:] = np.random.default_rng(seed).normal(0, scale, params.values.size)
    return params


# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {name}: {detail}")
