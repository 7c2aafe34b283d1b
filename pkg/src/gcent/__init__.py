"""Rewind-and-refine data collection at desk scale.

A fleet of simulated gridworld robots executes a learned policy; a task
sentinel watches for step completion and requests operator help on timeout;
the operator (scripted or human, via the gateway console) rewinds, corrects,
and hands control back. Intervention segments are aggregated into a growing
dataset that retrains the policy round by round.
"""

__version__ = "0.1.0"

TICK_RATE = 10  # simulated ticks per second; all "seconds" convert at this rate
