from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import TrainConfig


class TrainingError(RuntimeError):
    pass


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def as_tensor(x: np.ndarray) -> torch.Tensor:
    """(n, H, W) float array -> (n, 1, H, W) float32 tensor."""
    t = torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)
    return t.unsqueeze(1) if t.dim() == 3 else t


def make_optimizer(params, config: TrainConfig, lr: float, weight_decay: float = 0.0):
    params = [p for p in params if p.requires_grad]
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=weight_decay, nesterov=True)
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


class BatchSampler:
    """Endless stream of index batches, reshuffled after every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise TrainingError("cannot sample batches from an empty set")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self, size: int | None = None) -> np.ndarray:
        size = self.batch_size if size is None else size
        out = []
        while size > 0:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(size, self.n - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            size -= take
        return np.concatenate(out)


@torch.no_grad()
def predict_probs(clf, x: np.ndarray, batch_size: int = 256, through=None) -> torch.Tensor:
    """Eval-mode class probabilities, optionally after an aligner ``through``."""
    was_training = clf.training
    clf.eval()
    if through is not None:
        through.eval()
    out = []
    for i in range(0, len(x), batch_size):
        xb = as_tensor(x[i:i + batch_size])
        if through is not None:
            xb = through(xb)
        out.append(torch.softmax(clf(xb), dim=1))
    clf.train(was_training)
    return torch.cat(out) if out else torch.empty(0, 2)


@dataclass
class TrainLog:
    """Line-delimited training log; kept in memory, mirrored to disk when a
    run directory is given."""

    run_id: str = "run"
    path: Path | None = None
    records: list[dict] = field(default_factory=list)
    keep: bool = True

    @classmethod
    def for_run(cls, runs_dir: str, run_id: str) -> "TrainLog":
        if not runs_dir:
            return cls(run_id=run_id)
        path = Path(runs_dir) / run_id / "train_log.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")
        return cls(run_id=run_id, path=path)

    def log(self, step: int, values: dict[str, float], lr: float, t_over_T: float) -> None:
        rows = [
            {"run_id": self.run_id, "step": int(step), "loss_name": name, "value": float(value),
             "lr": float(lr), "t_over_T": float(t_over_T)}
            for name, value in values.items()
        ]
        if self.keep:
            self.records.extend(rows)
        if self.path is not None:
            with open(self.path, "a") as f:
                for row in rows:
                    f.write(json.dumps(row) + "\n")

    def values(self, loss_name: str) -> list[float]:
        return [r["value"] for r in self.records if r["loss_name"] == loss_name]
