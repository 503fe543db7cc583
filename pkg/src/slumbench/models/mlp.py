"""Torch MLP baseline: 4 hidden layers (512/256/128/64), batch normalisation
after each hidden affine map, Adam at lr 1e-3, early stopping on a 10%
validation carve-out with patience 20. Classification uses class-weighted
binary cross-entropy (pos_weight = #neg/#pos); regression uses Huber loss
with delta 10.

torch is imported lazily so that modules which never touch the MLP do not
pay its import cost. Training pins torch to a single thread for
reproducibility across worker configurations.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

_HIDDEN_DEFAULT = (512, 256, 128, 64)


def _torch():
    import torch

    return torch


def _build_net(input_dim: int, hidden: tuple[int, ...]):
    torch = _torch()
    from torch import nn

    layers = []
    prev = input_dim
    for width in hidden:
        layers += [nn.Linear(prev, width), nn.BatchNorm1d(width), nn.ReLU()]
        prev = width
    layers.append(nn.Linear(prev, 1))
    return nn.Sequential(*layers)


@dataclass
class MlpModel:
    """Opaque fitted state: network + training configuration."""

    net: object
    task: str
    input_dim: int
    hidden: tuple[int, ...]
    huber_delta: float

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        torch = _torch()
        self.net.eval()
        with torch.no_grad():
            out = []
            xt = torch.as_tensor(np.asarray(x, dtype=np.float32))
            for i in range(0, len(xt), 65536):
                out.append(self.net(xt[i : i + 65536]).squeeze(-1).numpy())
        return np.concatenate(out) if out else np.empty(0)


def train_mlp(
    x: np.ndarray,
    y: np.ndarray,
    task: str,
    seed: int,
    hidden: tuple[int, ...] = _HIDDEN_DEFAULT,
    lr: float = 1e-3,
    batch_size: int = 4096,
    max_epochs: int = 500,
    patience: int = 20,
    val_fraction: float = 0.1,
    huber_delta: float = 10.0,
    pos_weight: float | str = "auto",
) -> MlpModel:
    torch = _torch()
    from torch import nn

    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    n = len(x)

    torch.manual_seed(seed)
    n_threads_before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        # Early stopping monitors a carve-out of the training rows.
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if patience > 0 and n >= 10 else 0
        val_idx, tr_idx = perm[:n_val], perm[n_val:]

        net = _build_net(x.shape[1], hidden)
        if task == "cls":
            if pos_weight == "auto":
                n_pos = float(y[tr_idx].sum())
                n_neg = float(len(tr_idx) - n_pos)
                pw = n_neg / max(n_pos, 1.0)
            else:
                pw = float(pos_weight)
            loss_fn = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(pw))
        else:
            loss_fn = nn.HuberLoss(delta=huber_delta)
        opt = torch.optim.Adam(net.parameters(), lr=lr)

        xt = torch.as_tensor(x)
        yt = torch.as_tensor(y)
        tr = torch.as_tensor(tr_idx)
        va = torch.as_tensor(val_idx)
        gen = torch.Generator().manual_seed(seed)

        best_val = np.inf
        best_state = None
        stale = 0
        for _ in range(max_epochs):
            net.train()
            order = tr[torch.randperm(len(tr), generator=gen)]
            for i in range(0, len(order), batch_size):
                batch = order[i : i + batch_size]
                if len(batch) < 2:  # BatchNorm needs >= 2 rows in train mode
                    continue
                opt.zero_grad()
                out = net(xt[batch]).squeeze(-1)
                loss = loss_fn(out, yt[batch])
                loss.backward()
                opt.step()
            if n_val == 0:
                continue
            net.eval()
            with torch.no_grad():
                val_loss = float(loss_fn(net(xt[va]).squeeze(-1), yt[va]))
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                best_state = copy.deepcopy(net.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
        if best_state is not None:
            net.load_state_dict(best_state)
        net.eval()
        return MlpModel(net=net, task=task, input_dim=x.shape[1], hidden=tuple(hidden), huber_delta=huber_delta)
    finally:
        torch.set_num_threads(n_threads_before)
