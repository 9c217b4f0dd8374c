import numpy as np
import pytest

from das28joint.model import Hyperparams, JointModel, SubjectEffects, SubjectRecord, TrialData
from das28joint.sampler import SamplerState, make_rngs


def subject(sid="A", x=(0, 0), visits=(), ae=(156.0, False), effy=(156.0, False), exit_week=None):
    return SubjectRecord(sid, tuple(x), tuple(visits), {"AE": ae, "EFFY": effy}, exit_week)


def trial(subjects, end=156.0, n_treatments=3):
    return TrialData(list(subjects), end, n_treatments)


def state_for(model: JointModel, eff, hyper: Hyperparams, seed=0, kappa_step=1.0, effects_step=1.0):
    """Sampler state with imputed times placed just above each censoring bound."""
    pk = model.packed
    eff = np.atleast_2d(np.asarray(eff, dtype=float))
    eff = np.broadcast_to(eff, (pk.n_subjects, 4)).copy()
    u = np.where(pk.event, pk.log_time, pk.log_time + 0.1)
    return SamplerState(SubjectEffects.from_matrix(eff, log_dropout=u), hyper,
                        np.full(pk.n_subjects, float(kappa_step)),
                        np.full(pk.n_subjects, float(effects_step)), make_rngs(seed, 0))


def mc_z(sample, target):
    """|mean - target| in units of the iid Monte Carlo standard error."""
    sample = np.asarray(sample, dtype=float)
    return abs(sample.mean() - target) / (sample.std(ddof=1) / np.sqrt(len(sample)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Records one PASS/FAIL line per acceptance criterion for the run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
