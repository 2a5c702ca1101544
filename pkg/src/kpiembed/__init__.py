"""kpiembed: task-aligned low-dimensional embeddings of KPI time series."""

__version__ = "0.1.0"
