"""AERO: research data automation.

Monitored, versioned data assets; rule-triggered ingestion and analysis
flows running on pluggable executor endpoints; provenance capture; search;
and direct-download collections served separately from the API.
"""

__version__ = "0.1.0"
