"""Failure classes observed on a production accelerator cluster, with their frequencies."""

from __future__ import annotations

import enum
import random
from typing import Mapping


class FailureClass(str, enum.Enum):
    NETWORK_ANOMALY = "NetworkAnomaly"
    DEVICE_MEMORY = "DeviceMemory"
    AICORE = "AICore"
    TIMEOUT = "Timeout"
    DRIVER = "Driver"
    SEGFAULT = "SegFault"
    RESOURCE_ERROR = "ResourceError"
    INIT_FAILED = "InitFailed"
    CONFIG_ANOMALY = "ConfigAnomaly"
    OOM = "OOM"
    UNCLASSIFIED = "Unclassified"


HARDWARE_SHARE = 0.596
SOFTWARE_SHARE = 0.404

# Sub-splits within each category. Classes the source lists without a figure
# share the remainder equally.
HARDWARE_SPLIT: Mapping[FailureClass, float] = {
    FailureClass.NETWORK_ANOMALY: 0.57,
    FailureClass.DEVICE_MEMORY: 0.20,
    FailureClass.UNCLASSIFIED: 0.11,
    FailureClass.AICORE: 0.04,
    FailureClass.TIMEOUT: 0.04,
    FailureClass.DRIVER: 0.04,
}
SOFTWARE_SPLIT: Mapping[FailureClass, float] = {
    FailureClass.SEGFAULT: 0.34,
    FailureClass.UNCLASSIFIED: 0.09,
    FailureClass.RESOURCE_ERROR: 0.1425,
    FailureClass.INIT_FAILED: 0.1425,
    FailureClass.CONFIG_ANOMALY: 0.1425,
    FailureClass.OOM: 0.1425,
}

HARDWARE_CLASSES = frozenset(HARDWARE_SPLIT) - {FailureClass.UNCLASSIFIED}
SOFTWARE_CLASSES = frozenset(SOFTWARE_SPLIT) - {FailureClass.UNCLASSIFIED}


def sample_failure(rng: random.Random) -> tuple[str, FailureClass]:
    """Draw ``(category, class)`` with category in {"hardware", "software"}."""
    if rng.random() < HARDWARE_SHARE:
        category, split = "hardware", HARDWARE_SPLIT
    else:
        category, split = "software", SOFTWARE_SPLIT
    classes = list(split)
    cls = rng.choices(classes, weights=[split[c] for c in classes])[0]
    return category, cls


def category_of(cls: FailureClass) -> str:
    return "software" if cls in SOFTWARE_CLASSES else "hardware"
