import pytest
import torch

from onestep_sr.degradation import DegradationRecipe, make_pairs, synth_hq_labeled
from onestep_sr.nets import AutoEncoder, VelocityNet


@pytest.fixture
def tiny_ae():
    torch.manual_seed(0)
    ae = AutoEncoder(latent_channels=4, width=8, reduction=4)
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


@pytest.fixture
def tiny_teacher():
    torch.manual_seed(1)
    net = VelocityNet(channels=4, width=8, n_blocks=1, emb_dim=16, num_classes=4, T=1000)
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@pytest.fixture
def tiny_pairs():
    hq, labels = synth_hq_labeled(12, 32, 3)
    return make_pairs(hq, DegradationRecipe(), 3, labels)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion, echoed at the end of the run."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
