"""Feature-whitening optimizers: EVD/ZCA gradient preconditioning and a
recursive condition-number-reduction variant, with a direct-whitening
reference path for equivalence checking."""

__version__ = "0.1.0"
