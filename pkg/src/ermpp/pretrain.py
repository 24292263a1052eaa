"""Simulated pretrained initializations.

A backbone is pretrained on an auxiliary task over pooled features: predict
the angular sector of the first two input coordinates. ``pretrain_noise``
adds Gaussian input noise during pretraining and stands in for
augmentation-heavy recipes; 0 is the plain recipe. Swapping the resulting
backbone in as initialization is what the ``strong_init`` toggle does.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import rng_stream
from .errors import ArchitectureError
from .nn import HEAD_PREFIX, MLP, ModelSpec, ModelState, extract_state
from .optim import Adam, Phase, train_step, warmstart_mask


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    aux_classes: int = 8
    pretrain_noise: float = 0.3
    batch_size: int = 64
    lr: float = 1e-3

    def to_dict(self) -> dict:
        return asdict(self)


def sector_labels(x: np.ndarray, num_sectors: int) -> np.ndarray:
    angle = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    return np.minimum((angle / (2 * np.pi) * num_sectors).astype(np.int64), num_sectors - 1)


def pretrain_backbone(features: np.ndarray, spec: ModelSpec, cfg: PretrainConfig, seed: int) -> ModelState:
    """Train on the auxiliary task and return the backbone-only state."""
    aux_spec = ModelSpec(spec.input_dim, spec.hidden_dims, cfg.aux_classes, spec.use_batchnorm)
    model = MLP(aux_spec, rng_stream(seed, "pretrain-init"))
    opt = Adam(model.parameters(), lr=cfg.lr)
    mask = warmstart_mask(model, Phase.ALL)
    rng = rng_stream(seed, "pretrain-batches")
    for _ in range(cfg.steps):
        pick = rng.integers(0, len(features), cfg.batch_size)
        x = features[pick]
        y = sector_labels(x, cfg.aux_classes)
        if cfg.pretrain_noise > 0:
            x = x + cfg.pretrain_noise * rng.standard_normal(x.shape)
        train_step(model, opt, x, y, mask)
    return backbone_only(extract_state(model))


def backbone_only(state: ModelState) -> ModelState:
    params = {k: v.copy() for k, v in state.params.items() if not k.startswith(HEAD_PREFIX)}
    stats = {k: (m.copy(), v.copy()) for k, (m, v) in state.bn_stats.items()}
    return ModelState(params, stats, 0)


def apply_backbone(init: ModelState, backbone: ModelState) -> ModelState:
    """Replace the backbone entries of ``init`` with pretrained ones; the head stays."""
    own = {k for k in init.params if not k.startswith(HEAD_PREFIX)}
    diff = (own ^ set(backbone.params)) | {f"bn:{k}" for k in set(init.bn_stats) ^ set(backbone.bn_stats)}
    if diff:
        raise ArchitectureError(f"pretrained backbone does not fit the model: {sorted(diff)}")
    out = init.copy()
    for k, v in backbone.params.items():
        if v.shape != init.params[k].shape:
            raise ArchitectureError(f"shape mismatch for {k}: {v.shape} vs {init.params[k].shape}")
        out.params[k] = v.copy()
    out.bn_stats = {k: (m.copy(), v.copy()) for k, (m, v) in backbone.bn_stats.items()}
    return out
