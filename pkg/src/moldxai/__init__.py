"""LSTM quality classification for molding-cycle time series with
attribution-driven feature reduction."""

__version__ = "0.1.0"
