"""ETH/UCY-style trajectory files: parsing, windowing, leave-one-out splits.

A scene file is whitespace-separated `frame_id ped_id x y` rows. Raw
frame ids commonly advance in strides of 10; unique frame ids are ranked
into consecutive observation steps at load time (one step = 0.4 s in the
source recordings).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

SCENE_GROUPS = ("eth", "hotel", "univ", "zara1", "zara2")
FRAME_PERIOD_SECONDS = 0.4


class DataError(Exception):
    """Any malformed or unusable trajectory input."""


class SceneParseError(DataError):
    pass


class EmptySceneError(DataError):
    pass


@dataclass(frozen=True)
class TrajectoryScene:
    """One scene's records, frames re-indexed to consecutive steps."""

    scene_id: str
    frames: np.ndarray      # int, per record, consecutive step index
    ped_ids: np.ndarray     # int, per record
    coords: np.ndarray      # float, per record, x y
    frame_period: float = FRAME_PERIOD_SECONDS

    @property
    def n_records(self) -> int:
        return self.frames.shape[0]

    @property
    def n_steps(self) -> int:
        return int(self.frames.max()) + 1 if self.n_records else 0

    @property
    def n_peds(self) -> int:
        return int(np.unique(self.ped_ids).size)


@dataclass(frozen=True)
class TrajectoryWindow:
    """A fixed-length slice in which every listed pedestrian is present
    at all obs_len + pred_len consecutive steps."""

    scene_id: str
    start_frame: int
    ped_ids: tuple
    positions_obs: np.ndarray    # N x obs_len x 2, absolute coordinates
    positions_pred: np.ndarray   # N x pred_len x 2

    @property
    def n_peds(self) -> int:
        return len(self.ped_ids)

    @property
    def obs_len(self) -> int:
        return self.positions_obs.shape[1]

    @property
    def pred_len(self) -> int:
        return self.positions_pred.shape[1]


def _parse_value(token: str, path: str, lineno: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise SceneParseError(f"{path}:{lineno}: bad {what} value {token!r}") from None


def _parse_id(token: str, path: str, lineno: int, what: str) -> int:
    val = _parse_value(token, path, lineno, what)
    if val != int(val):
        raise SceneParseError(f"{path}:{lineno}: non-integral {what} {token!r}")
    return int(val)


def load_scene(path: str, scene_id: str | None = None, delimiter: str | None = None) -> TrajectoryScene:
    """Parse one scene file. Duplicate (frame, ped) rows and malformed
    lines raise SceneParseError naming the offending line."""
    if scene_id is None:
        scene_id = os.path.splitext(os.path.basename(path))[0]
    frames, peds, xs, ys = [], [], [], []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split(delimiter)
            if len(parts) != 4:
                raise SceneParseError(
                    f"{path}:{lineno}: expected 4 fields (frame ped x y), got {len(parts)}")
            frame = _parse_id(parts[0], path, lineno, "frame id")
            ped = _parse_id(parts[1], path, lineno, "pedestrian id")
            x = _parse_value(parts[2], path, lineno, "x")
            y = _parse_value(parts[3], path, lineno, "y")
            if (frame, ped) in seen:
                raise SceneParseError(
                    f"{path}:{lineno}: duplicate record for frame {frame}, pedestrian {ped}")
            seen.add((frame, ped))
            frames.append(frame)
            peds.append(ped)
            xs.append(x)
            ys.append(y)
    if not frames:
        raise EmptySceneError(f"{path}: no trajectory records")

    frames = np.array(frames, dtype=np.int64)
    # rank raw frame ids (stride 10 or otherwise) into consecutive steps
    unique = np.unique(frames)
    step_of = {int(f): i for i, f in enumerate(unique)}
    steps = np.array([step_of[int(f)] for f in frames], dtype=np.int64)
    peds = np.array(peds, dtype=np.int64)
    coords = np.column_stack([xs, ys]).astype(np.float64)

    order = np.lexsort((peds, steps))
    return TrajectoryScene(scene_id=scene_id, frames=steps[order],
                           ped_ids=peds[order], coords=coords[order])


def load_dataset(root: str) -> dict:
    """Scene files from `<root>/<split>/<scene>.txt`, keyed by split."""
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    by_split = {}
    for split in sorted(os.listdir(root)):
        split_dir = os.path.join(root, split)
        if not os.path.isdir(split_dir):
            continue
        scenes = []
        for name in sorted(os.listdir(split_dir)):
            if name.endswith(".txt"):
                scenes.append(load_scene(os.path.join(split_dir, name)))
        by_split[split] = scenes
    if not by_split or not any(by_split.values()):
        raise DataError(f"no scene files found under {root!r}")
    return by_split


def scene_group(scene_id: str) -> str:
    """Scene group for leave-one-out; longest known prefix wins."""
    lowered = scene_id.lower()
    best = ""
    for group in SCENE_GROUPS:
        if lowered.startswith(group) and len(group) > len(best):
            best = group
    return best or lowered


def leave_one_out_split(scenes, held_out: str):
    """Partition scenes into (train, test) by held-out scene group."""
    groups = sorted({scene_group(s.scene_id) for s in scenes})
    if held_out not in groups:
        raise DataError(
            f"held-out group {held_out!r} not present; valid groups: {', '.join(groups)}")
    train = [s for s in scenes if scene_group(s.scene_id) != held_out]
    test = [s for s in scenes if scene_group(s.scene_id) == held_out]
    return train, test


def extract_windows(scene: TrajectoryScene, obs_len: int = 8, pred_len: int = 12,
                    stride: int = 1):
    """All windows of obs_len + pred_len consecutive steps with at least
    one pedestrian present throughout. Start steps advance by `stride`
    from step 0, so larger strides emit a subset of stride-1 windows."""
    if obs_len < 1 or pred_len < 1:
        raise ValueError("obs_len and pred_len must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    total = obs_len + pred_len
    windows = []
    if scene.n_steps < total:
        return windows

    # per-pedestrian sorted step arrays for O(log) presence queries
    tracks = {}
    for ped in np.unique(scene.ped_ids):
        mask = scene.ped_ids == ped
        tracks[int(ped)] = (scene.frames[mask], scene.coords[mask])

    for start in range(0, scene.n_steps - total + 1, stride):
        members, positions = [], []
        for ped, (steps, coords) in tracks.items():
            lo = np.searchsorted(steps, start)
            hi = np.searchsorted(steps, start + total)
            # presence at every step of the window, not merely `total` records
            if hi - lo == total and steps[lo] == start:
                members.append(ped)
                positions.append(coords[lo:hi])
        if not members:
            continue
        pos = np.stack(positions)
        windows.append(TrajectoryWindow(
            scene_id=scene.scene_id,
            start_frame=start,
            ped_ids=tuple(members),
            positions_obs=pos[:, :obs_len].copy(),
            positions_pred=pos[:, obs_len:].copy(),
        ))
    return windows


def to_features(window: TrajectoryWindow, mode: str = "displacement") -> np.ndarray:
    """Model inputs for the observed steps, N x obs_len x 2.

    displacement: per-step deltas, first step zero. absolute: raw
    coordinates.
    """
    _check_mode(mode)
    if mode == "absolute":
        return window.positions_obs.copy()
    feats = np.zeros_like(window.positions_obs)
    feats[:, 1:] = np.diff(window.positions_obs, axis=1)
    return feats


def target_features(window: TrajectoryWindow, mode: str = "displacement") -> np.ndarray:
    """Supervision for the predicted steps, N x pred_len x 2, matching
    the coordinate convention of `to_features`."""
    _check_mode(mode)
    if mode == "absolute":
        return window.positions_pred.copy()
    full = np.concatenate([window.positions_obs[:, -1:], window.positions_pred], axis=1)
    return np.diff(full, axis=1)


def features_to_positions(features: np.ndarray, origins: np.ndarray) -> np.ndarray:
    """Invert displacement features: cumulative sum from per-pedestrian origins."""
    return np.asarray(origins)[:, None, :] + np.cumsum(features, axis=1)


def _check_mode(mode: str) -> None:
    if mode not in ("displacement", "absolute"):
        raise ValueError(f"unknown feature mode {mode!r}")
