"""Load-balancing games among federated edge cloudlets.

Library layout:

- ``queueing``  -- M/M/c primitives (Erlang-C, sojourn times, M/M/1 bound)
- ``slicing``   -- per-cloudlet min-max processor slicing
- ``game``      -- game data model, utilities, load classification, rewards
- ``ne_solver`` -- centralized Nash-equilibrium computation and certification
- ``mechanism`` -- mediator rounds, truthfulness audit, price conditions
- ``carla``     -- continuous-action learning automata for decentralized NE
- ``sim``       -- event-driven timeslot simulator with trace replay
- ``config``    -- YAML experiment configs <-> GameContext
- ``cli``       -- command-line front end (also writes figures next to CSVs)
"""

__version__ = "0.1.0"
