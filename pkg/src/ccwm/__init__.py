"""Cycle-consistent world models over two image modalities of one POMDP."""

__version__ = "0.1.0"

DOMAIN_A = "A"
DOMAIN_B = "B"
DOMAINS = (DOMAIN_A, DOMAIN_B)
