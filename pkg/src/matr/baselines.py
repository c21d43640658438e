"""Non-learned and ablation motion updaters for track queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import ANCHOR_EPS, NormBox, as_box_array
from .model import EncoderMemory, MATRModel, QuerySet

# Noise priors, tuned once on the synthetic benchmark and frozen.
PROCESS_NOISE_POS = 1e-4
PROCESS_NOISE_VEL = 1e-3
OBSERVATION_NOISE = 1e-3
INIT_POS_VAR = 1e-3
INIT_VEL_VAR = 1.0

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)
_Q = np.diag([PROCESS_NOISE_POS] * 4 + [PROCESS_NOISE_VEL] * 4)
_R = np.eye(4) * OBSERVATION_NOISE
INIT_COVARIANCE = np.diag([INIT_POS_VAR] * 4 + [INIT_VEL_VAR] * 4)


class KalmanNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray  # (cx, cy, w, h, vcx, vcy, vw, vh)
    covariance: np.ndarray  # 8x8

    def box(self) -> np.ndarray:
        return _clamp_box(self.mean[:4])


def _clamp_box(b: np.ndarray) -> np.ndarray:
    out = np.array(b, dtype=np.float64)
    out[:2] = np.clip(out[:2], 0.0, 1.0)
    out[2:] = np.clip(out[2:], ANCHOR_EPS, 1.0)
    return out


def kalman_init(box) -> KalmanState:
    b = np.asarray(as_box_array(box), dtype=np.float64).reshape(4)
    return KalmanState(np.concatenate([b, np.zeros(4)]), INIT_COVARIANCE.copy())


def kalman_predict(state: KalmanState) -> tuple[KalmanState, NormBox]:
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + _Q
    new = KalmanState(mean, 0.5 * (cov + cov.T))
    return new, NormBox(*new.box())


def kalman_update(state: KalmanState, observation) -> KalmanState:
    z = np.asarray(as_box_array(observation), dtype=np.float64).reshape(4)
    innovation = z - _H @ state.mean
    s = _H @ state.covariance @ _H.T + _R
    gain = np.linalg.solve(s, _H @ state.covariance).T
    mean = state.mean + gain @ innovation
    # Joseph form keeps the covariance symmetric positive semidefinite
    i_kh = np.eye(8) - gain @ _H
    cov = i_kh @ state.covariance @ i_kh.T + gain @ _R @ gain.T
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov).min() < -1e-8:
        raise KalmanNumericalError("covariance lost positive semidefiniteness")
    return KalmanState(mean, cov)


def qim_like_update(model: MATRModel, tracks: QuerySet,
                    memory: EncoderMemory | None = None) -> QuerySet:
    """Self-attention update of track features; anchors and identities untouched.

    ``memory`` is accepted for interface parity with the motion-aware update
    and ignored.
    """
    return model.qim_update(tracks)


def klf_update(model: MATRModel, tracks: QuerySet, states: dict[int, KalmanState]):
    """Anchors from per-identity Kalman predictions, features via the QIM-like path.

    Returns the updated query set and the advanced filter states.
    """
    if len(tracks) == 0:
        return tracks, dict(states)
    new_states = dict(states)
    anchors = []
    for ident, anchor in zip(tracks.identities, tracks.anchors.detach().cpu().numpy()):
        state = states.get(ident) or kalman_init(anchor)
        state, predicted = kalman_predict(state)
        new_states[ident] = state
        anchors.append(predicted.as_array())
    moved = QuerySet(tracks.features,
                     torch.as_tensor(np.stack(anchors), dtype=tracks.anchors.dtype),
                     list(tracks.identities), list(tracks.kinds))
    return model.qim_update(moved), new_states


def klf_observe(states: dict[int, KalmanState], identities, boxes) -> dict[int, KalmanState]:
    """Fold decoder output boxes back into the filters (new identities are initialized)."""
    out = dict(states)
    for ident, box in zip(identities, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)):
        out[ident] = kalman_update(out[ident], box) if ident in out else kalman_init(box)
    return out
