import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from kft.kernels import SideInfo  # noqa: E402
from kft.model import KftModel  # noqa: E402

torch.set_num_threads(1)


def random_side(extents, dims, rng, modes=None):
    modes = range(len(extents)) if modes is None else modes
    return {p: SideInfo(p, rng.standard_normal((extents[p], dims))) for p in modes}


def randomize_aux(model, rng, scale=1.0):
    with torch.no_grad():
        for plist in (model.weights, model.scales, model.biases):
            for t in plist:
                t.copy_(torch.from_numpy(scale * rng.standard_normal(tuple(t.shape))))
    return model


def make_model(variant, space, extents, rank=2, seed=0, side_modes=None, side_dim=2, groups=None,
               kernel="rbf", rff_features=16, **kw):
    rng = np.random.default_rng(seed)
    side = random_side(extents, side_dim, rng, side_modes)
    model = KftModel(extents, variant=variant, space=space, rank=rank, groups=groups, side=side,
                     kernel=kernel, lengthscale=1.3, rff_features=rff_features, seed=seed, **kw)
    with torch.no_grad():
        for c in model.cores:
            c.copy_(torch.from_numpy(rng.standard_normal(tuple(c.shape)) * 0.5))
    return randomize_aux(model, rng)


def all_indices(extents):
    grids = np.meshgrid(*[np.arange(n) for n in extents], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance summary
ACCEPTANCE_CRITERIA = {
    1: "forward passes match brute-force index sums",
    2: "constant side information collapses vanilla, not WLR/LS",
    3: "regularizers match oracles, RFF within 5%",
    4: "finite-difference gradients, all groups and VI phases",
    5: "variational closed forms match Monte Carlo and quadrature",
    6: "Kronecker sampling covariance and Cholesky identity",
    7: "calibration self-consistency and degenerate case",
    8: "side-information ablation ordering over 5 seeds",
    9: "end-to-end byte-identical artifacts",
}
_criterion_outcomes: dict[int, list[bool]] = {}


def _criterion_of(nodeid: str):
    if "test_acceptance.py" not in nodeid:
        return None
    name = nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return None
    return int(name[len("test_criterion_"):].split("_")[0])


def pytest_runtest_logreport(report):
    n = _criterion_of(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _criterion_outcomes.setdefault(n, []).append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _criterion_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, label in ACCEPTANCE_CRITERIA.items():
        runs = _criterion_outcomes.get(n)
        status = "NOT RUN" if not runs else ("PASS" if all(runs) else "FAIL")
        terminalreporter.write_line(f"criterion {n} [{status}] {label}")
