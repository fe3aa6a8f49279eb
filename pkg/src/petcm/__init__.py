"""Consistency-model synthesis of full-dose PET slices from low-dose inputs."""

__version__ = "0.1.0"
