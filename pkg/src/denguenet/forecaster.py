"""Sliding windows and the per-branch stacked-LSTM regression model."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .ingestion import format_epiweek, parse_epiweek, week_index

logger = logging.getLogger(__name__)

BRANCHES = ("texture", "embedding", "cases")
VARIANTS = {
    "satellite-only": ("texture", "embedding"),
    "case-only": ("cases",),
    "combined": ("texture", "embedding", "cases"),
}


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    branches: tuple[str, ...] = VARIANTS["satellite-only"]
    texture_dim: int = 4
    embedding_dim: int = 4
    cases_dim: int = 2
    hidden_sizes: tuple[int, int] = (32, 16)
    dropout: float = 0.2
    dense_width: int = 16
    negative_slope: float = 0.01
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 1
    window: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_learning_rate: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(b for b in BRANCHES if b in self.branches))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if not self.branches:
            raise ValueError("at least one branch required")
        if len(self.hidden_sizes) != 2:
            raise ValueError("three recurrent layers per branch: give two intermediate hidden sizes")

    @property
    def recurrent_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def branch_dim(self, branch: str) -> int:
        return getattr(self, f"{branch}_dim")

    @property
    def mlp_input_dim(self) -> int:
        return sum(self.branch_dim(b) for b in self.branches)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branches"] = list(self.branches)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


def make_variant(config: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return dataclasses.replace(config, branches=VARIANTS[variant])


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WindowSample:
    weeks: tuple  # input weeks, consecutive
    target_week: object
    texture: np.ndarray  # (W, 9)
    embedding: np.ndarray  # (W, D)
    cases: np.ndarray  # (W,)
    target: float


def build_windows(weeks: Sequence, texture: np.ndarray, embedding: np.ndarray, cases: Sequence[float],
                  window: int = 5) -> list[WindowSample]:
    """One sample per run of ``window + 1`` consecutive weeks.

    Inputs are weeks ``t-window+1 .. t`` and the target is the case count of
    week ``t+1``. Runs broken by a missing week yield no sample.
    """
    n = len(weeks)
    texture, embedding = np.asarray(texture, dtype=np.float64), np.asarray(embedding, dtype=np.float64)
    cases = np.asarray(cases, dtype=np.float64)
    if not (len(texture) == len(embedding) == len(cases) == n):
        raise ValueError("weeks and feature arrays differ in length")
    if n < window + 1:
        raise ValueError(f"series of {n} weeks is shorter than window + 1 = {window + 1}")
    idx = [week_index(w) for w in weeks]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("weeks must be strictly increasing")
    out = []
    for t in range(window - 1, n - 1):
        lo = t - window + 1
        if idx[t + 1] - idx[lo] != window:
            continue
        out.append(WindowSample(tuple(weeks[lo:t + 1]), weeks[t + 1], texture[lo:t + 1],
                                embedding[lo:t + 1], cases[lo:t + 1], float(cases[t + 1])))
    return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class BranchLSTM(nn.Module):
    """Three stacked LSTM layers, each followed by dropout; returns the last time step."""

    def __init__(self, n_in: int, hidden_sizes: Sequence[int], n_out: int, dropout: float):
        super().__init__()
        sizes = [n_in, *hidden_sizes, n_out]
        self.lstms = nn.ModuleList(nn.LSTM(a, b, batch_first=True) for a, b in zip(sizes, sizes[1:]))
        self.dropouts = nn.ModuleList(nn.Dropout(dropout) for _ in self.lstms)

    def forward(self, x):
        for lstm, drop in zip(self.lstms, self.dropouts):
            x, _ = lstm(x)
            x = drop(x)
        return x[:, -1, :]


class DengueNet(nn.Module):
    def __init__(self, config: ModelConfig, input_dims: dict[str, int]):
        super().__init__()
        self.config = config
        self.input_dims = {b: int(input_dims[b]) for b in config.branches}
        self.branches = nn.ModuleDict({
            b: BranchLSTM(self.input_dims[b], config.hidden_sizes, config.branch_dim(b), config.dropout)
            for b in config.branches
        })
        self.head = nn.Sequential(
            nn.Linear(config.mlp_input_dim, config.dense_width),
            nn.LeakyReLU(config.negative_slope),
            nn.Linear(config.dense_width, 1),
        )

    def branch_outputs(self, inputs: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        return {b: self.branches[b](inputs[b]) for b in self.config.branches}

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        outs = self.branch_outputs(inputs)
        z = torch.cat([outs[b] for b in self.config.branches], dim=1)
        return self.head(z).squeeze(-1)


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = x.reshape(-1, x.shape[-1])
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class MinMaxScaler:
    low: float
    high: float

    @classmethod
    def fit(cls, y: np.ndarray) -> "MinMaxScaler":
        return cls(float(np.min(y)), float(np.max(y)))

    @property
    def span(self) -> float:
        return self.high - self.low if self.high > self.low else 1.0

    def __call__(self, y):
        return (np.asarray(y, dtype=np.float64) - self.low) / self.span

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.span + self.low


def _stack(windows: Sequence[WindowSample], branch: str) -> np.ndarray:
    if branch == "cases":
        return np.stack([w.cases for w in windows])[..., None]
    return np.stack([getattr(w, branch) for w in windows])


@dataclass
class TrainedModel:
    network: DengueNet
    config: ModelConfig
    feature_scalers: dict[str, Standardizer | None]
    target_scaler: MinMaxScaler
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def tensors(self, windows: Sequence[WindowSample]) -> dict[str, torch.Tensor]:
        out = {}
        for b in self.config.branches:
            x = _stack(windows, b)
            if x.shape[-1] != self.network.input_dims[b]:
                raise ValueError(f"{b} features have dimension {x.shape[-1]}, model expects "
                                 f"{self.network.input_dims[b]}")
            if x.shape[1] != self.config.window:
                raise ValueError(f"window length {x.shape[1]} != configured {self.config.window}")
            scaler = self.feature_scalers.get(b)
            if scaler is not None:
                x = scaler(x)
            out[b] = torch.as_tensor(x, dtype=torch.float32)
        return out

    def save(self, directory) -> Path:
        """``weights.npz``, ``config.json``, ``scalers.json`` and ``history.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        state = {k: v.detach().cpu().numpy() for k, v in self.network.state_dict().items()}
        with open(d / "weights.npz", "wb") as fh:
            np.savez(fh, **state)
        cfg = {"model": self.config.to_dict(), "input_dims": self.network.input_dims}
        (d / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        scalers = {
            "target": {"low": self.target_scaler.low, "high": self.target_scaler.high},
            "features": {b: None if s is None else {"mean": s.mean.tolist(), "std": s.std.tolist()}
                         for b, s in self.feature_scalers.items()},
        }
        (d / "scalers.json").write_text(json.dumps(scalers, indent=1, sort_keys=True) + "\n")
        hist = {"best_epoch": self.best_epoch, "epochs": self.history}
        (d / "history.json").write_text(json.dumps(hist, indent=1, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        d = Path(directory)
        cfg = json.loads((d / "config.json").read_text())
        config = ModelConfig(**{**cfg["model"], "branches": tuple(cfg["model"]["branches"]),
                                "hidden_sizes": tuple(cfg["model"]["hidden_sizes"])})
        net = DengueNet(config, cfg["input_dims"])
        with np.load(d / "weights.npz") as z:
            net.load_state_dict({k: torch.from_numpy(z[k]) for k in z.files})
        net.eval()
        sc = json.loads((d / "scalers.json").read_text())
        feats = {b: None if v is None else Standardizer(np.array(v["mean"]), np.array(v["std"]))
                 for b, v in sc["features"].items()}
        hist = json.loads((d / "history.json").read_text())
        return cls(net, config, feats, MinMaxScaler(**sc["target"]), hist["epochs"], hist["best_epoch"])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(train_windows: Sequence[WindowSample], val_windows: Sequence[WindowSample],
          config: ModelConfig) -> TrainedModel:
    """Train for exactly ``config.epochs`` epochs and keep the weights of the best validation epoch.

    Adam at ``config.learning_rate``; the rate is halved after
    ``plateau_patience`` epochs without validation improvement (floor
    ``min_learning_rate``). Without validation windows the training loss
    drives both the schedule and model selection.
    """
    if not train_windows:
        raise ValueError("empty training split")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    scalers: dict[str, Standardizer | None] = {}
    dims = {}
    for b in config.branches:
        x = _stack(train_windows, b)
        dims[b] = x.shape[-1]
        scalers[b] = None if b == "embedding" else Standardizer.fit(x)
    target_scaler = MinMaxScaler.fit(np.array([w.target for w in train_windows]))

    net = DengueNet(config, dims)
    model = TrainedModel(net, config, scalers, target_scaler)
    xs = model.tensors(train_windows)
    ys = torch.as_tensor(target_scaler([w.target for w in train_windows]), dtype=torch.float32)
    if val_windows:
        xv = model.tensors(val_windows)
        yv = torch.as_tensor(target_scaler([w.target for w in val_windows]), dtype=torch.float32)

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.plateau_factor, patience=config.plateau_patience,
        min_lr=config.min_learning_rate)
    loss_fn = nn.MSELoss()
    n = len(train_windows)
    best_loss, best_state = np.inf, None

    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net({b: x[idx] for b, x in xs.items()}), ys[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, float(loss))
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / n
        net.eval()
        with torch.no_grad():
            val_loss = float(loss_fn(net(xv), yv)) if val_windows else train_loss
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
        lr = opt.param_groups[0]["lr"]
        sched.step(val_loss)
        model.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if val_loss < best_loss:
            best_loss, model.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    net.eval()
    return model


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@dataclass
class PredictionSeries:
    region: str
    weeks: list
    y_true: np.ndarray
    y_hat: np.ndarray
    splits: list[str]

    def subset(self, split: str) -> "PredictionSeries":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return PredictionSeries(self.region, [self.weeks[i] for i in keep], self.y_true[keep],
                                self.y_hat[keep], [split] * len(keep))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["epiweek,split,y_true,y_hat"]
        for w, s, y, yh in zip(self.weeks, self.splits, self.y_true, self.y_hat):
            lines.append(f"{format_epiweek(w)},{s},{float(y)!r},{float(yh)!r}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path, region: str = "") -> "PredictionSeries":
        rows = [line.split(",") for line in Path(path).read_text().splitlines()[1:] if line]
        return cls(region, [parse_epiweek(r[0]) for r in rows], np.array([float(r[2]) for r in rows]),
                   np.array([float(r[3]) for r in rows]), [r[1] for r in rows])


def predict(model: TrainedModel, windows: Sequence[WindowSample], region: str = "",
            splits: Sequence[str] | None = None) -> PredictionSeries:
    """Inference with dropout off; outputs in case units, clamped at zero."""
    model.network.eval()
    if not windows:
        return PredictionSeries(region, [], np.zeros(0), np.zeros(0), [])
    with torch.no_grad():
        z = model.network(model.tensors(windows)).numpy().astype(np.float64)
    y_hat = np.maximum(model.target_scaler.inverse(z), 0.0)
    splits = list(splits) if splits is not None else ["test"] * len(windows)
    return PredictionSeries(region, [w.target_week for w in windows],
                            np.array([w.target for w in windows]), y_hat, splits)
