"""Synthetic domain-shift benchmark, metrics, strategies and reports."""

from .data import DomainSpec, SegDataset, SegSample, generate_domain, preset
from .metrics import delta_p, format_delta_p, iou_per_class, miou
from .report import SequenceReport, StepResult, param_growth_report
from .strategies import (STRATEGIES, BenchConfig, SequenceRunner, ewc_penalty, fisher_diagonal,
                         run_sequence, run_sequences)
