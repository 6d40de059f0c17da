"""Bulk-bitwise processing-in-memory OLAP simulator and query engine."""

from pimolap.ledger import CostParams, CostLedger, CostReport, endurance_10y
from pimolap.fabric import Crossbar, AggSpec
from pimolap.device import DeviceGeometry, PimDevice, PimRequest

__all__ = [
    "CostParams",
    "CostLedger",
    "CostReport",
    "endurance_10y",
    "Crossbar",
    "AggSpec",
    "DeviceGeometry",
    "PimDevice",
    "PimRequest",
]
