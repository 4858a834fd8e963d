"""MLP builder used by the world model heads, the agent and the IDM."""
from typing import Optional

import torch.nn as nn


def mlp(
    in_dim: int,
    out_dim: Optional[int],
    units: int,
    layers: int,
    dropout: float = 0.0,
) -> nn.Sequential:
    """`layers` x (Linear -> LayerNorm -> Swish [-> Dropout]) followed by a Linear to `out_dim`.

    With `out_dim=None` the final projection is omitted and the trunk's width is `units`.
    """
    modules = []
    dims = [in_dim] + [units] * layers
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        modules += [nn.Linear(d_in, d_out), nn.LayerNorm(d_out), nn.SiLU()]
        if dropout > 0:
            modules.append(nn.Dropout(p=dropout))
    if out_dim is not None:
        modules.append(nn.Linear(dims[-1], out_dim))
    return nn.Sequential(*modules)
