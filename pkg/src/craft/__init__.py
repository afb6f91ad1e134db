"""Derivative-free collaborative fine-tuning of a black-box vision-language classifier.

Prompt embeddings are searched with CMA-ES in a random low-dimensional
subspace while a small residual network refines the returned logits.
"""
from .blackbox import BudgetExhausted, LocalOracle, SurrogateModel
from .remote import RemoteOracle
from .tasks import FewShotTask, generate, read_task, write_task
from .trainer import TrainConfig, TrainReport, run

__version__ = "0.1.0"

__all__ = ["BudgetExhausted", "FewShotTask", "LocalOracle", "RemoteOracle", "SurrogateModel",
           "TrainConfig", "TrainReport", "generate", "read_task", "run", "write_task"]
