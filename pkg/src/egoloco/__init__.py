"""Planar legged-locomotion lab: scandot teachers trained with PPO, depth
students distilled with DAgger, and a tabular checker for the teacher/student
return-gap bound."""

__version__ = "0.1.0"
