"""Complementary temporal-difference learning with selective explanations."""
