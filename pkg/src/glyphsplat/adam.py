"""Adam over the cloud's five parameter groups.

Updates are sparse per (group, row): a row participates in a step only when
its gradient there is nonzero. Rows that receive no gradient keep their
moments and values bit-identical, which is what makes "optimize one
component, others untouched" an exact statement rather than an approximate
one. Bias correction uses the global step counter, so a row first touched
late sees a slightly smaller effective warmup; with default betas that bias
is negligible and the determinism is worth it.

Quaternion rows are renormalized right after they move (and only then, so
untouched rows stay bit-identical).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

GROUPS = GaussianCloud.PARAM_FIELDS


def _group_shapes(n):
    return {
        "positions": (n, 3),
        "log_scales": (n, 3),
        "rotations": (n, 4),
        "colors": (n, 3),
        "opacity_logits": (n,),
    }


@dataclass
class AdamState:
    """First and second moments per parameter group plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros(cls, n):
        shapes = _group_shapes(n)
        return cls(
            m={k: np.zeros(s) for k, s in shapes.items()},
            v={k: np.zeros(s) for k, s in shapes.items()},
        )

    def rows(self):
        return self.m["positions"].shape[0]

    def select(self, index):
        """Re-index moment rows; duplicates and drops follow the index array."""
        index = np.asarray(index)
        return AdamState(
            m={k: a[index].copy() for k, a in self.m.items()},
            v={k: a[index].copy() for k, a in self.v.items()},
            step=self.step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(cloud, grads, state, learning_rate):
    """One Adam update in place; returns the per-group count of touched rows.

    Zero-gradient rows are skipped entirely (no moment decay), so a step
    whose gradients are all zero changes nothing but the step counter.
    """
    if state.rows() != len(cloud):
        raise ValueError("Adam state rows do not match the cloud")
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    touched = {}
    for name in GROUPS:
        g = getattr(grads, name)
        param = getattr(cloud, name)
        live = g != 0.0 if g.ndim == 1 else np.any(g != 0.0, axis=1)
        touched[name] = int(live.sum())
        if not live.any():
            continue
        gl = g[live]
        m = state.m[name]
        v = state.v[name]
        m[live] = state.beta1 * m[live] + (1.0 - state.beta1) * gl
        v[live] = state.beta2 * v[live] + (1.0 - state.beta2) * gl * gl
        update = learning_rate * (m[live] / corr1) / (np.sqrt(v[live] / corr2) + state.eps)
        param[live] -= update
        if name == "rotations":
            q = param[live]
            param[live] = q / np.linalg.norm(q, axis=1, keepdims=True)
    cloud.touch()
    return touched


def save_adam(state, path, config_hash=b"\x00" * 32):
    """Binary checkpoint sidecar: step counter, config hash, float32 moments."""
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    n = state.rows()
    with open(path, "wb") as fh:
        fh.write(b"ADAM")
        fh.write(np.uint64(state.step).tobytes())
        fh.write(np.uint64(n).tobytes())
        fh.write(config_hash)
        for name in GROUPS:
            fh.write(state.m[name].astype("<f4").tobytes())
            fh.write(state.v[name].astype("<f4").tobytes())


def load_adam(path):
    """Returns (AdamState, config_hash)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"ADAM":
        raise ValueError(f"{path}: bad magic")
    step = int(np.frombuffer(data[4:12], dtype=np.uint64)[0])
    n = int(np.frombuffer(data[12:20], dtype=np.uint64)[0])
    config_hash = data[20:52]
    shapes = _group_shapes(n)
    expected = sum(2 * int(np.prod(s)) for s in shapes.values()) * 4
    body = data[52:]
    if len(body) != expected:
        raise ValueError(f"{path}: truncated moments")
    state = AdamState.zeros(n)
    state.step = step
    offset = 0
    for name in GROUPS:
        count = int(np.prod(shapes[name]))
        for dest in (state.m, state.v):
            flat = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
            dest[name] = flat.astype(np.float64).reshape(shapes[name])
            offset += count * 4
    return state, config_hash
