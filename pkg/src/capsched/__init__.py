"""Capacity-table scheduling, dual-staged scaling and a trace-driven cluster simulator."""
