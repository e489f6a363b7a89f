"""Deterministic screening and validation of candidate digital biomarkers.

Submodules: ``tabular`` (ingest, imputation), ``stats`` (kernels),
``screening``, ``firewall`` (leakage guards), ``battery`` (11 checks and
verdicts), ``gates`` and ``reporting`` (quality gates, fact sheet), ``synth``
(synthetic cohorts), ``harness`` (held-out robustness) and ``pipeline``/``cli``.
"""
__version__ = "0.1.0"
