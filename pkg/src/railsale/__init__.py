"""In-process railway ticket-sale engine with oversell protection and a load-test harness."""

__version__ = "0.1.0"
