"""Experiment configs, probes, stage detection, export and the command line."""
