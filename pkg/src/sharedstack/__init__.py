"""Simulator of a shared, multi-tenant network stack with per-guest CPU budgets.

Guests (VMs) share fast-path cores running a one-shot TCP-over-GRE data path.
Every batch's cycles are charged to the guests it served, a central allocator
replenishes per-core budgets each update period, and the schedulers stop
serving a guest whose budget on a core is used up.
"""

__version__ = "0.1.0"
