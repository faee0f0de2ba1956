"""flowmi: mutual information estimation with conditional rectified flows.

The package trains small conditional flow models with the CFM objective,
recovers mutual information between data and conditions from the trained
(or closed-form) velocity fields, benchmarks the estimator on tasks with
known MI, and runs an MI-guided self-supervised fine-tuning loop at toy
scale. See the README for the CLI surface.
"""

__version__ = "0.1.0"

from .errors import ConfigError, FlowMIError, NumericalError

__all__ = ["ConfigError", "FlowMIError", "NumericalError", "__version__"]
