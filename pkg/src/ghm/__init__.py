"""Grouped heterogeneous mixture (GHM) models for clustered data."""

from .data import ClusteredDataset, Schema, SimilarityMatrix, load_dataset, load_similarity, save_dataset
from .em import FitConfig, FitResult, GhmParams, LocalFit, fit, fit_global_mixture, fit_local_mixtures
from .families import Gaussian, Poisson, ZeroMass, parse_families, weighted_fit
from .selection import SelectionGrid, ic, select

__version__ = "0.1.0"
