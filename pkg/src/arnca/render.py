"""PPM (P6) images of state frames and prediction heatmaps, plus per-frame metric CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import TARGET_CODES, Env, SequenceChunk, palette_for
from .metrics import frame_auc, frame_f1


def to_bytes(unit: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` values to ``0..255``, rounding half up so 0.5 becomes 128."""
    return np.floor(np.clip(unit, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = to_bytes(rgb)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def write_ppm(path: str | Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ppm_bytes(rgb))
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def state_image(states: np.ndarray, env: Env | str) -> np.ndarray:
    return to_bytes(palette_for(env).lookup(states))


def heatmap_image(prob: np.ndarray) -> np.ndarray:
    gray = to_bytes(np.asarray(prob, dtype=np.float64))
    return np.repeat(gray[..., None], 3, axis=-1)


def overlay_image(prob: np.ndarray, states: np.ndarray, env: Env | str) -> np.ndarray:
    """Heatmap with every ground-truth target cell painted in its palette colour."""
    env = Env.parse(env)
    img = heatmap_image(prob)
    target = np.isin(states, sorted(TARGET_CODES[env]))
    img[target] = state_image(states, env)[target]
    return img


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "f1", "auc"])
        writer.writeheader()
        for row in rows:
            auc = row["auc"]
            writer.writerow({"frame": row["frame"], "f1": repr(float(row["f1"])),
                             "auc": "" if np.isnan(auc) else repr(float(auc))})
    return path


def render_chunk(chunk: SequenceChunk, out_dir: str | Path, maps: np.ndarray | None = None,
                 t_obs: int = 0, overlay: bool = False) -> list[Path]:
    """Write ``state_TTT.ppm`` for every frame and, given ``maps``, prediction images.

    ``maps`` holds probability maps for frames ``t_obs, t_obs + 1, ...``.
    Returns the written paths in order.
    """
    out_dir = Path(out_dir)
    states = chunk.states()
    written = [write_ppm(out_dir / f"state_{t:03d}.ppm", state_image(s, chunk.env))
               for t, s in enumerate(states)]
    if maps is None:
        return written
    masks = chunk.masks()
    rows = []
    for k, prob in enumerate(maps):
        t = t_obs + k
        img = overlay_image(prob, states[t], chunk.env) if overlay else heatmap_image(prob)
        written.append(write_ppm(out_dir / f"pred_{t:03d}.ppm", img))
        rows.append({"frame": t, "f1": frame_f1(prob, masks[t]), "auc": frame_auc(prob, masks[t])})
    written.append(write_metrics_csv(out_dir / "metrics.csv", rows))
    return written
