import numpy as np
import pytest
import torch

from veindiff.classical_veins import write_fused_masks
from veindiff.synthdata import generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """2 classes x 2 captures x 2 sessions, fused masks, 8 images in total."""
    root = tmp_path_factory.mktemp("toy")
    manifest = generate_dataset(str(root), num_classes=2, samples_per_session=2, seed=3)
    write_fused_masks(manifest)
    return manifest


def finite_difference_check(fn, inputs, eps=1e-6, rtol=1e-4):
    """Compare autograd against central differences for a scalar ``fn``.

    ``inputs`` are float64 leaf tensors. Returns the worst relative error.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs)
    worst = 0.0
    for k, x in enumerate(inputs):
        numeric = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            args_p = [y.detach().clone() for y in inputs]
            args_m = [y.detach().clone() for y in inputs]
            args_p[k].view(-1)[i] += eps
            args_m[k].view(-1)[i] -= eps
            with torch.no_grad():
                numeric.view(-1)[i] = (fn(*args_p) - fn(*args_m)) / (2 * eps)
        num = (grads[k] - numeric).norm()
        den = max(grads[k].norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (num / den).item())
    assert worst <= rtol, f"relative gradient error {worst:.3e}"
    return worst


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def check(number: int, passed: bool, detail: str, gated: bool = True) -> None:
        store[number] = (bool(passed), gated, detail)
        if gated:
            assert passed, f"criterion {number}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, gated, detail = store[number]
        verdict = ("PASS" if passed else "FAIL") if gated else ("HOLDS" if passed else "DOES NOT HOLD") + " (reported only)"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
