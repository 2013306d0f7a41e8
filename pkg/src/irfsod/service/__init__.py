"""HTTP service wrapping the detector: load a checkpoint once, register
support boxes per category, then serve detection and evaluation requests
with no per-request optimization."""
