"""Toolkit for repairing and mining one-ticket transit operating data.

Stages: synthetic city generation, AFC/AVL clock synchronization, missing
stop-record repair, O-T-D journey reconstruction, closed trip-chain mining,
route-choice preference fitting, ridership redistribution and express-route
design.
"""

__version__ = "0.1.0"
