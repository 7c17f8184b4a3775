"""Plain-text tensor dump of a network.

Layout (UTF-8)::

    impomdp-rqn 1
    shape <fc1> <fc2> <hidden> <fc3>
    obs_center <float>
    obs_scale <float>
    cost_scale <float>
    tensors <count>
    <name> <ndim> <dim_1> ... <dim_ndim>
    <row-major values separated by spaces>
    ...

Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .network import NetworkShape, RQNetwork

MAGIC = "impomdp-rqn 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, network: RQNetwork, cost_scale: float = 1.0) -> None:
    s = network.shape
    lines = [
        MAGIC,
        f"shape {s.fc1} {s.fc2} {s.hidden} {s.fc3}",
        f"obs_center {network.obs_center!r}",
        f"obs_scale {network.obs_scale!r}",
        f"cost_scale {float(cost_scale)!r}",
        f"tensors {len(network.params)}",
    ]
    for name, arr in network.params.items():
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[RQNetwork, float]:
    """Returns the network and the cost scale it was trained with."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if lines[0] != MAGIC:
            raise CheckpointError("not an impomdp-rqn checkpoint")
        fc1, fc2, hidden, fc3 = (int(v) for v in lines[1].split()[1:])
        obs_center = float(lines[2].split()[1])
        obs_scale = float(lines[3].split()[1])
        cost_scale = float(lines[4].split()[1])
        count = int(lines[5].split()[1])
        params = {}
        pos = 6
        for _ in range(count):
            head = lines[pos].split()
            name, ndim = head[0], int(head[1])
            dims = tuple(int(d) for d in head[2:2 + ndim])
            values = np.array([float(v) for v in lines[pos + 1].split()], dtype=np.float64)
            if values.size != int(np.prod(dims)):
                raise CheckpointError(f"{name}: expected {int(np.prod(dims))} values, got {values.size}")
            params[name] = values.reshape(dims)
            pos += 2
    except (IndexError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    shape = NetworkShape(fc1, fc2, hidden, fc3)
    try:
        net = RQNetwork(params, shape, obs_center, obs_scale)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return net, cost_scale
