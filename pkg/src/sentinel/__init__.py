"""Face-screening surveillance toolkit.

Subsystems: image primitives (`imaging`), the cascade face detector (`haar`),
cascade model files (`cascade_xml`), detector training (`training`), face
signatures (`signature`), the watchlist service and client (`watchlist`),
the event log (`events`), and the orchestrating `pipeline`.
"""

__version__ = "0.1.0"
