"""Configuration, serialisation, experiments and the command-line interface."""
