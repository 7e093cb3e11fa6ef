import math
from typing import Optional

from click.testing import CliRunner
import pytest

from ecnfallback.config import ScenarioConfig


@pytest.fixture(autouse=True)
def change_dir(monkeypatch, tmp_path):
    """Changes the CWD to a fresh directory, so results land there."""
    monkeypatch.chdir(tmp_path)


@pytest.fixture(autouse=True, scope="session")
def runner():
    return CliRunner()


@pytest.fixture()
def short_run():
    """A three-second 1:1 scenario over CoDel with invariant checking on."""
    return ScenarioConfig(
        rate_bps=12_000_000,
        base_rtt_us=20_000,
        duration_us=3_000_000,
        check_invariants=True,
    )


class FloatEwmas:
    """Real-valued srtt and mdev with the same recurrences as RttEstimator."""

    def __init__(self, first: float, srtt_shift: int, g_diff: int = 1) -> None:
        self.g1 = 2.0**-srtt_shift
        self.g2 = 2.0 ** -(srtt_shift + g_diff)
        self.srtt = float(first)
        self.mdev = 1.0

    def on_ack(self, sample: float) -> None:
        error = sample - self.srtt
        self.srtt += self.g1 * error
        self.mdev += self.g2 * (abs(error) - self.mdev)


class FloatRerouteFilter:
    """Real-valued srtt/mdev pairs run through the reroute filter recurrences.

    With tolerance_shift None the alternative pair retires as soon as its
    mdev exceeds the primary one, otherwise once it is within mdev >> shift.
    """

    def __init__(
        self,
        first: float,
        srtt_shift: int,
        g_diff: int = 1,
        k2: int = 2,
        tolerance_shift: Optional[int] = 5,
    ) -> None:
        g1 = 2.0**-srtt_shift
        g2 = 2.0 ** -(srtt_shift + g_diff)
        self.g1, self.g2, self.k2 = g1, g2, k2
        self.k1 = 1 + g2 * (k2 * (1 - g1) + (k2 - 1) * (1 - g2) - 1)
        self.srtt = [float(first), None]
        self.mdev = [1.0, 0.0]
        self.tolerance = 0.0 if tolerance_shift is None else 2.0**-tolerance_shift
        self.sign = 0

    @property
    def enabled(self) -> bool:
        return self.srtt[1] is not None

    @property
    def cur_rtt(self) -> float:
        if self.enabled and self.mdev[1] < self.mdev[0]:
            return self.srtt[1]
        return self.srtt[0]

    def on_ack(self, sample: float) -> None:
        srtt, mdev = self.srtt, self.mdev
        error = sample - srtt[0]
        bound = self.k2 * mdev[0]
        if abs(error) <= bound or (self.enabled and self.sign * error <= bound):
            if self.enabled:
                mdev[1] += self.g2 * (abs(sample - srtt[1]) - mdev[1])
                if mdev[1] > mdev[0] * (1 - self.tolerance):
                    srtt[1] = None
                else:
                    srtt[1] += self.g1 * (sample - srtt[1])
        elif self.enabled:
            mdev[1] += self.g2 * (abs(sample - srtt[1]) - mdev[1])
            srtt[1] += self.g1 * (sample - srtt[1])
        else:
            mdev[1] = mdev[0] * self.k1
            srtt[1] = float(sample)
            self.sign = 1 if error > 0 else -1
        mdev[0] += self.g2 * (abs(sample - srtt[0]) - mdev[0])
        srtt[0] += self.g1 * (sample - srtt[0])


@pytest.fixture()
def float_reroute():
    return FloatRerouteFilter


def float_round_delta(v: float, d: float, s: float) -> float:
    """Per-round score change with real logs and the default weights."""
    delta = 0.5 * math.log2(v / 750)
    if d > 2000:
        delta += 0.5 * math.log2(d / 2000)
    return delta - 0.25 * s


@pytest.fixture()
def float_ewmas():
    return FloatEwmas


@pytest.fixture()
def score_oracle():
    return float_round_delta
