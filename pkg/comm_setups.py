"""
Communication setups and reactive limits for the shipped ucsd49 network
Partitions are listed as published; DC graphs are the unions of their cliques
"""
from typing import Dict, List, Optional, Sequence

import config

from controller import CommGraph, Partition, ReactiveBox, cover_cliques, validate_partition

UCSD_CONTROLLABLE = (14, 15, 17, 19, 20, 27, 29, 30, 32, 34, 38, 39, 41)

# MVar, symmetric box
UCSD_Q_LIM_MVAR = (2, 2, 2, 2, 2, 5, 2, 5, 5, 5, 5, 5, 5)

COMM_SETUPS = {
    # No communication: every controller sees only its own voltage
    'NC': {
        'name': 'No Communication',
        'partition': tuple((b,) for b in UCSD_CONTROLLABLE),
    },
    # Small communication radius
    'DC-1': {
        'name': 'Distributed Communication 1',
        'partition': (
            (14, 15, 17, 20),
            (19, 32, 34),
            (27, 30, 38, 39),
            (29,),
            (41,),
        ),
    },
    # Overlapping cliques; bus 41 reaches the network through 27/30/38/39
    'DC-2': {
        'name': 'Distributed Communication 2',
        'partition': (
            (14, 15, 17, 19, 20, 27, 29, 30, 32, 34, 38, 39),
            (27, 30, 38, 39, 41),
        ),
    },
    'FC': {
        'name': 'Full Communication',
        'partition': (UCSD_CONTROLLABLE,),
    },
}

# ordered by communication level
SETUP_ORDER = ('NC', 'DC-1', 'DC-2', 'FC')


def comm_graph(setup: str, controllable: Sequence[int] = UCSD_CONTROLLABLE) -> CommGraph:
    if setup not in COMM_SETUPS:
        raise KeyError(f"unknown communication setup {setup!r}; choose from {list(SETUP_ORDER)}")
    return CommGraph.from_cliques(controllable, COMM_SETUPS[setup]['partition'])


def setup_partition(setup: str, controllable: Sequence[int] = UCSD_CONTROLLABLE,
                    explicit: Optional[List[List[int]]] = None) -> Partition:
    """Published partition for a setup, or an explicit one checked against the setup's graph"""
    graph = comm_graph(setup, controllable)
    if explicit is not None:
        partition = Partition(tuple(tuple(s) for s in explicit))
    else:
        partition = Partition(COMM_SETUPS[setup]['partition'])
    validate_partition(partition, graph)
    return partition


def greedy_partition(setup: str, controllable: Sequence[int] = UCSD_CONTROLLABLE) -> Partition:
    return cover_cliques(comm_graph(setup, controllable))


def default_box(q_lim_mvar: Optional[Sequence[float]] = None, base_mva: float = config.BASE_MVA) -> ReactiveBox:
    return ReactiveBox.from_mvar(UCSD_Q_LIM_MVAR if q_lim_mvar is None else q_lim_mvar, base_mva)


def describe_setups() -> Dict[str, int]:
    """Setup -> subgraph count"""
    return {name: len(COMM_SETUPS[name]['partition']) for name in SETUP_ORDER}
