"""Supply management for ride-hailing fleets with book-ahead rides."""

__version__ = "0.1.0"
