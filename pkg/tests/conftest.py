import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or timing test")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_complex(rng, shape, dtype=np.complex128):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(dtype)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm((a - b).ravel()) / max(np.linalg.norm(np.asarray(b).ravel()), 1e-300))


def numeric_grad(f, arr, step=1e-3, same_branch=None):
    """Central finite differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place).

    ``same_branch()``, if given, reports whether the last evaluation took the
    same ReLU / max-pool branches as the expansion point; the step is then
    shrunk tenfold (at most four times) until neither side crosses a kink.
    """
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old, h = flat[i], step
        for _ in range(5):
            flat[i] = old + h
            hi = f()
            smooth = same_branch is None or same_branch()
            flat[i] = old - h
            lo = f()
            smooth = smooth and (same_branch is None or same_branch())
            flat[i] = old
            if smooth:
                break
            h /= 10
        gflat[i] = (hi - lo) / (2 * h)
    return g


class BranchRecorder:
    """Records ReLU signs and max-pool winners so finite differences can avoid kinks."""

    def __init__(self, monkeypatch):
        from csrecon import autograd as ag
        from csrecon import kernels

        self.trace, self.base = [], None
        relu, pool = ag.relu, ag.maxpool2d

        def relu_rec(x):
            self.trace.append(x.data > 0)
            return relu(x)

        def pool_rec(x):
            self.trace.append(kernels.maxpool2x2(x.data)[1])
            return pool(x)

        monkeypatch.setattr(ag, "relu", relu_rec)
        monkeypatch.setattr(ag, "maxpool2d", pool_rec)

    def wrap(self, f):
        def run():
            self.trace = []
            return f()

        return run

    def mark_base(self):
        self.base = list(self.trace)

    def same_branch(self):
        return len(self.trace) == len(self.base) and all(np.array_equal(a, b) for a, b in zip(self.trace, self.base))


def max_rel_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines, key=lambda x: int(x[0].split(".")[0])):
            terminalreporter.write_line(f"{verdict}  criterion {name}: {detail}")


def tensor_rel_error(analytic, numeric, floor=1e-8):
    """Norm-wise relative error of one parameter tensor's gradient."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def randomize_parameters(params, rng, bias_scale=0.1):
    """He-normal weights and small random biases for gradient checks.

    Zero biases put whole ReLU layers on their kink, and the near-zero output
    projection of a fresh block shrinks inner gradients towards round-off.
    """
    for name, t in params.items():
        if name.endswith("bias"):
            t.data[...] = bias_scale * rng.standard_normal(t.shape)
        else:
            t.data[...] = rng.standard_normal(t.shape) * np.sqrt(2.0 / np.prod(t.shape[1:]))
