"""Experiments built from the search, finetune and codec stages."""
