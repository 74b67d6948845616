"""mdml: a streaming platform for scientific-instrument IoT data.

Ingests enveloped multi-rate sensor streams over MQTT-style topics, fuses
them with configurable batching rules, runs analysis functions on pluggable
compute targets, archives everything for replay, and closes the loop against
a simulated flame-spray-pyrolysis instrument.
"""

__version__ = "0.1.0"
