"""Training, evaluation, visualisation and benchmarking on top of the model."""
