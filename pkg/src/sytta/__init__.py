"""Test-time adaptation of a tiny byte-level transformer on unlabeled queries."""

from .autodiff import Tensor, no_grad
from .corpus import Cohort, DomainSpec, generate_cohort
from .engine import AdaptConfig, PassCounter, adapt_cohort, expected_pass_count, run_cohort_protocol
from .lm import LmConfig, ModelState, load_checkpoint
from .metrics import rouge_lsum
from .objectives import GateConfig
from .weighting import DiwConfig, DiwState, diw_step


def load_base():
    """The bundled base checkpoint, pretrained on the general-grammar corpus."""
    from .cli import default_checkpoint
    return load_checkpoint(default_checkpoint())


__all__ = [
    "AdaptConfig", "Cohort", "DiwConfig", "DiwState", "DomainSpec", "GateConfig", "LmConfig", "ModelState",
    "PassCounter", "Tensor", "adapt_cohort", "diw_step", "expected_pass_count", "generate_cohort",
    "load_base", "load_checkpoint", "no_grad", "rouge_lsum", "run_cohort_protocol",
]
