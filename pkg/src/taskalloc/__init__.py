"""Payoff mechanism design for task allocation games in large populations."""
