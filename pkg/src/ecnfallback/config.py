"""src/ecnfallback/config.py
Scenario description and its loading from TOML files and CLI flags.
"""
import dataclasses
import logging

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from ecnfallback.active_probe import ProbeParams
from ecnfallback.aqm_models import AqmKind, AqmParams
from ecnfallback.cc_engines import Changeover, CompetitorKind, PragueParams
from ecnfallback.errors import ConfigError, ContractError
from ecnfallback.fallback_detect import DetectionParams

log = logging.getLogger(__name__)

RATES_MBPS = (4, 12, 40, 120, 200)
RTTS_MS = (5, 10, 20, 50, 100)
PATTERN_LABELS = ("0", "1", "9", "L", "1L")


@dataclass(frozen=True)
class ClassLoad:
    """Traffic of one class: long-running flows, plus web flows if `web`."""

    long_flows: int = 0
    web: bool = False

    @classmethod
    def parse(cls, label: str) -> "ClassLoad":
        label = label.strip().upper()
        if label not in PATTERN_LABELS:
            raise ConfigError(
                f"unknown traffic label {label!r}, expected one of "
                + ", ".join(PATTERN_LABELS)
            )
        web = label.endswith("L")
        digits = label.rstrip("L")
        return cls(int(digits) if digits else 0, web)

    @property
    def empty(self) -> bool:
        return self.long_flows == 0 and not self.web

    def __str__(self) -> str:
        return (str(self.long_flows) if self.long_flows else "") + (
            "L" if self.web else ""
        ) or "0"


@dataclass(frozen=True)
class TrafficPattern:
    """A Prague:competitor pair such as "1L:9"."""

    prague: ClassLoad = ClassLoad(1)
    competitor: ClassLoad = ClassLoad(1)

    @classmethod
    def parse(cls, text: str) -> "TrafficPattern":
        left, sep, right = text.partition(":")
        if not sep:
            raise ConfigError(f"traffic pattern {text!r} must look like '1L:9'")
        return cls(ClassLoad.parse(left), ClassLoad.parse(right))

    def __str__(self) -> str:
        return f"{self.prague}:{self.competitor}"


@dataclass(frozen=True)
class AqmSwitch:
    at_us: int
    kind: AqmKind


@dataclass(frozen=True)
class Reroute:
    """A step in the base RTT of one flow, or of all if flow_id is None.

    The step is delta_us, unless mdev_multiple is set: then it is that
    multiple of the RTT mean deviation a Prague flow has measured when the
    step happens.
    """

    at_us: int
    delta_us: int = 0
    flow_id: Optional[int] = None
    mdev_multiple: Optional[float] = None


@dataclass(frozen=True)
class FeatureFlags:
    fallback: bool = True
    active_probe: bool = False
    reroute_filter: bool = True
    changeover: Changeover = Changeover.ALT2


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one simulation run needs.

    Attributes:
        rate_bps: Bottleneck rate.
        base_rtt_us: Round-trip propagation delay.
        aqm: Bottleneck discipline at the start.
        pattern: Prague and competitor traffic.
        competitor: Classic congestion control of the competitor class.
        duration_us: Length of the run.
        seed: Root of every random stream of the run.
        prague_start_us, competitor_start_us: Start of each class's long
            flows and of its web traffic.
        switch: Optional AQM change during the run.
        reroute: Optional base RTT step during the run.
        trace_packets: Keep per-packet queue and throughput series.
        check_invariants: Verify byte conservation after every event.
    """

    rate_bps: int = 12_000_000
    base_rtt_us: int = 50_000
    aqm: AqmKind = AqmKind.CODEL
    pattern: TrafficPattern = TrafficPattern()
    competitor: CompetitorKind = CompetitorKind.CUBIC_ECN
    duration_us: int = 20_000_000
    seed: int = 1
    prague_start_us: int = 0
    competitor_start_us: int = 0
    switch: Optional[AqmSwitch] = None
    reroute: Optional[Reroute] = None
    flags: FeatureFlags = FeatureFlags()
    aqm_params: AqmParams = AqmParams()
    detection: DetectionParams = DetectionParams()
    prague: PragueParams = PragueParams()
    probe: ProbeParams = ProbeParams()
    trace_packets: bool = True
    check_invariants: bool = False

    def validate(self) -> "ScenarioConfig":
        """Returns self, or raises ConfigError."""
        if self.rate_bps <= 0:
            raise ConfigError("link rate must be positive")
        if self.base_rtt_us <= 0:
            raise ConfigError("base RTT must be positive")
        if self.duration_us <= 0:
            raise ConfigError("duration must be positive")
        if self.pattern.prague.empty:
            raise ConfigError("the Prague class needs at least one flow")
        for name in ("prague_start_us", "competitor_start_us"):
            if not 0 <= getattr(self, name) < self.duration_us:
                raise ConfigError(f"{name} must lie within the run")
        if self.switch is not None and not 0 < self.switch.at_us < self.duration_us:
            raise ConfigError("the AQM switch must happen within the run")
        if self.reroute is not None:
            if not 0 < self.reroute.at_us < self.duration_us:
                raise ConfigError("the reroute must happen within the run")
            multiple = self.reroute.mdev_multiple
            if multiple is not None and multiple <= 0:
                raise ConfigError("a reroute in mean deviations must be positive")
            if self.base_rtt_us + self.reroute.delta_us <= 0:
                raise ConfigError("a reroute cannot make the base RTT negative")
        if self.rate_bps // 1_000_000 not in RATES_MBPS or (
            self.base_rtt_us // 1000 not in RTTS_MS
        ):
            log.debug("scenario %s lies outside the standard grid", self.label)
        return self

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    @property
    def label(self) -> str:
        aqm = self.aqm.value
        if self.switch is not None:
            aqm += f"-{self.switch.kind.value}"
        rate = f"{self.rate_bps / 1e6:g}M"
        rtt = f"{self.base_rtt_us / 1000:g}ms"
        return f"{aqm}_{rate}_{rtt}_{self.pattern}".replace(":", "-")

    @property
    def final_aqm(self) -> AqmKind:
        return self.switch.kind if self.switch is not None else self.aqm

    def detection_params(self) -> DetectionParams:
        return dataclasses.replace(
            self.detection, reroute_filter=self.flags.reroute_filter
        )

    def prague_params(self) -> PragueParams:
        return dataclasses.replace(
            self.prague,
            fallback=self.flags.fallback,
            changeover=self.flags.changeover,
        )

    def probe_params(self) -> ProbeParams:
        return dataclasses.replace(self.probe, enabled=self.flags.active_probe)


def _seconds(value: Any) -> int:
    return int(round(float(value) * 1_000_000))


def _millis(value: Any) -> int:
    return int(round(float(value) * 1000))


def _enum(kind: Any, value: Any, what: str) -> Any:
    try:
        return kind(str(value).lower())
    except ValueError:
        choices = ", ".join(member.value for member in kind)
        raise ConfigError(f"unknown {what} {value!r}, expected one of {choices}")


def scenario_from_mapping(
    values: Mapping[str, Any], base: ScenarioConfig = ScenarioConfig()
) -> ScenarioConfig:
    """Applies human units (Mb/s, ms, s) from a file or from flags to `base`.

    Keys whose value is None are ignored, so unset CLI options fall through.
    """
    values = {k.replace("-", "_"): v for k, v in values.items() if v is not None}
    changes: Dict[str, Any] = {}
    flags: Dict[str, Any] = {}
    try:
        for key, value in values.items():
            if key == "rate_mbps":
                changes["rate_bps"] = int(round(float(value) * 1_000_000))
            elif key == "rtt_ms":
                changes["base_rtt_us"] = _millis(value)
            elif key == "aqm":
                changes["aqm"] = _enum(AqmKind, value, "AQM")
            elif key == "pattern":
                changes["pattern"] = TrafficPattern.parse(str(value))
            elif key == "competitor":
                changes["competitor"] = _enum(CompetitorKind, value, "competitor")
            elif key == "duration_s":
                changes["duration_us"] = _seconds(value)
            elif key == "seed":
                changes["seed"] = int(value)
            elif key in ("prague_start_s", "competitor_start_s"):
                changes[key[:-2] + "_us"] = _seconds(value)
            elif key == "switch":
                changes["switch"] = AqmSwitch(
                    _seconds(value["at_s"]), _enum(AqmKind, value["aqm"], "AQM")
                )
            elif key == "reroute":
                multiple = value.get("mdev")
                changes["reroute"] = Reroute(
                    _seconds(value["at_s"]),
                    _millis(value.get("delta_ms", 0)),
                    value.get("flow"),
                    None if multiple is None else float(multiple),
                )
            elif key == "fifo_packets":
                changes["aqm_params"] = dataclasses.replace(
                    base.aqm_params, fifo_packets=int(value)
                )
            elif key in ("fallback", "active_probe", "reroute_filter"):
                flags[key] = bool(value)
            elif key == "changeover":
                flags["changeover"] = _enum(Changeover, value, "changeover")
            elif key in ("trace_packets", "check_invariants"):
                changes[key] = bool(value)
            elif key == "detection":
                changes["detection"] = dataclasses.replace(base.detection, **value)
            elif key == "prague":
                changes["prague"] = dataclasses.replace(base.prague, **value)
            else:
                raise ConfigError(f"unknown scenario key {key!r}")
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, (ConfigError, ContractError)):
            raise ConfigError(str(err)) from err
        raise ConfigError(f"bad scenario value: {err}") from err
    if flags:
        changes["flags"] = dataclasses.replace(base.flags, **flags)
    return dataclasses.replace(base, **changes).validate()


def load_scenario(
    path: Path, base: ScenarioConfig = ScenarioConfig()
) -> ScenarioConfig:
    """Reads a TOML scenario file."""
    try:
        with open(path, "rb") as file:
            data = tomllib.load(file)
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror or err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    log.info("loaded scenario file %s", path)
    return scenario_from_mapping(data, base)
