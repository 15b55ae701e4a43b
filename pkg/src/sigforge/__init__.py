"""sigforge: generative forgery attacks and countermeasures for writer-dependent
offline signature verifiers."""

__version__ = "0.1.0"
