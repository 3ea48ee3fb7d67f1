"""Gated recurrent network laboratory: refine gates, uniform gate
initialization and the gate ablation matrix, trained with hand-written BPTT."""

__version__ = "0.1.0"
