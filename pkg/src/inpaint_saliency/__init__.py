"""Saliency maps that explain an image classifier by optimizing which region,
once replaced with a learned healthy-looking inpainting, removes the evidence
for the positive class."""

from .errors import ContractError, DimensionError, DomainError, InputError, NumericalError

__version__ = "0.1.0"

__all__ = ["ContractError", "DimensionError", "DomainError", "InputError", "NumericalError",
           "__version__"]
