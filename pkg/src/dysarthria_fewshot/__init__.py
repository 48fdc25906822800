"""Few-shot dysarthric speech classification toolkit.

Pipeline stages: synthetic corpus -> log-Mel features -> speaker-disjoint
split -> LoRA fine-tuning of a transformer encoder -> evaluation report.
"""

__version__ = "0.1.0"
