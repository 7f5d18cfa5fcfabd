"""Trader-Company ensembles of formulaic return predictors."""

from .company import CompanyConfig, CompanyState, company_predict, init_company, train_step
from .formula import HyperRanges, TermParams, TraderParams, format_trader, parse_trader
from .returns_data import ReturnsPanel, compute_log_returns, load_price_csv

__all__ = [
    "CompanyConfig",
    "CompanyState",
    "HyperRanges",
    "ReturnsPanel",
    "TermParams",
    "TraderParams",
    "company_predict",
    "compute_log_returns",
    "format_trader",
    "init_company",
    "load_price_csv",
    "parse_trader",
    "train_step",
]
