"""Pipelined decode loop on a virtual clock, with bubble accounting."""

from .ab import ab_compare
from .bubbles import BubbleReport, bubble_breakdown
from .config import ConfigError, EngineConfig, Features, load_config
from .engine import PipelineFault, RunResult, TimelineRecord, run
from .oracle import reference_transcript

__all__ = ["ab_compare", "BubbleReport", "bubble_breakdown", "ConfigError", "EngineConfig",
           "Features", "load_config", "PipelineFault", "RunResult", "TimelineRecord", "run",
           "reference_transcript"]
