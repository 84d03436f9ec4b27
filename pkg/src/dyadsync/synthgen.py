"""Synthetic dyadic skeleton sequences with controlled synchrony.

Person A moves each joint on its own sinusoid around a fixed canonical
skeleton; person B is A transformed according to the requested class:

* ``Sync``    — identical motion plus tiny coordinate jitter,
* ``ModSync`` — the same motion delayed by a few frames with a mild
  amplitude mismatch (consistent but tardy),
* ``Unsync``  — freshly drawn frequencies, phases and amplitudes.

Both persons share the anchor skeleton, so a zero-jitter Sync pair is
bitwise identical and its cross-similarity diagonal is exactly zero.
Generation is pure given (seed, class, index): every sequence draws from
its own named stream, so files can be produced in any order or in
parallel and still come out byte-for-byte reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .pose_io import CLASS_NAMES, NUM_JOINTS, SkeletonSequence
from .rng import stream

# Roughly human joint layout (COCO order: nose, eyes, ears, shoulders,
# elbows, wrists, hips, knees, ankles), centered in the unit square.
ANCHOR = np.array(
    [
        [0.50, 0.30],
        [0.48, 0.28], [0.52, 0.28],
        [0.46, 0.30], [0.54, 0.30],
        [0.42, 0.40], [0.58, 0.40],
        [0.38, 0.50], [0.62, 0.50],
        [0.36, 0.60], [0.64, 0.60],
        [0.44, 0.62], [0.56, 0.62],
        [0.43, 0.76], [0.57, 0.76],
        [0.42, 0.90], [0.58, 0.90],
    ]
)

# score bins, mirroring the alpha/beta class thresholds in reverse
SCORE_BINS = {"Sync": (8.36, 10.0), "ModSync": (7.16, 8.36), "Unsync": (0.0, 7.16)}


@dataclass(frozen=True)
class SynthConfig:
    f: int = 148
    num_joints: int = NUM_JOINTS
    lag: int = 10
    amp_mismatch: float = 1.15
    jitter: float = 0.004
    seed: int = 0
    image_size: tuple = (320, 240)

    def __post_init__(self):
        if self.jitter < 0:
            raise ParameterError(f"jitter must be >= 0, got {self.jitter}")
        if not 0 <= self.lag < self.f:
            raise ParameterError(f"lag must lie in [0, f), got {self.lag}")
        if self.num_joints != ANCHOR.shape[0]:
            raise ParameterError(f"generator provides exactly {ANCHOR.shape[0]} joints")


def _draw_motion(rng, num_joints):
    """Per-joint, per-coordinate sinusoid parameters."""
    return {
        "freq": rng.uniform(0.5, 3.0, size=(num_joints, 2)),
        "phase": rng.uniform(0.0, 2.0 * math.pi, size=(num_joints, 2)),
        "amp": rng.uniform(0.03, 0.12, size=(num_joints, 2)),
    }


def _evaluate(motion, t, f, amp_scale=1.0):
    """Joint positions at (possibly shifted) frame times t: (len(t), J, 2)."""
    t = np.asarray(t, dtype=np.float64)[:, None, None]
    wave = np.sin(2.0 * math.pi * motion["freq"] * t / f + motion["phase"])
    return ANCHOR + amp_scale * motion["amp"] * wave


def generate_dyad_sequence(cfg: SynthConfig, klass: str, index: int = 0) -> SkeletonSequence:
    """One labeled sequence of cfg.f frames, coordinates in [0, 1]."""
    if klass not in CLASS_NAMES:
        raise ParameterError(f"unknown class {klass!r}; expected one of {CLASS_NAMES}")
    rng = stream(cfg.seed, f"synth/{klass}/{index}")
    motion = _draw_motion(rng, cfg.num_joints)
    t = np.arange(cfg.f)
    person_a = _evaluate(motion, t, cfg.f)
    if klass == "Sync":
        person_b = person_a.copy()
    elif klass == "ModSync":
        person_b = _evaluate(motion, t - cfg.lag, cfg.f, amp_scale=cfg.amp_mismatch)
    else:
        person_b = _evaluate(_draw_motion(rng, cfg.num_joints), t, cfg.f)
    if cfg.jitter > 0:
        person_b = person_b + rng.normal(scale=cfg.jitter, size=person_b.shape)
    frames = np.clip(np.stack([person_a, person_b], axis=1), 0.0, 1.0)
    lo, hi = SCORE_BINS[klass]
    score = float(rng.uniform(lo, hi))
    return SkeletonSequence(
        frames=frames,
        source_id=f"{klass.lower()}_{index:04d}",
        label_class=klass,
        label_score=score,
    )


def generate_sequences(cfg: SynthConfig, n_per_class: int, start_index: int = 0) -> list:
    """In-memory batch: n_per_class sequences of each class, class-major order."""
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    return [
        generate_dyad_sequence(cfg, klass, index)
        for klass in CLASS_NAMES
        for index in range(start_index, start_index + n_per_class)
    ]


def sequence_to_document(seq: SkeletonSequence, image_size) -> dict:
    width, height = image_size
    scale = np.array([width, height], dtype=np.float64)
    frames = []
    for t in range(seq.num_frames):
        persons = []
        for pid in range(2):
            pixels = seq.frames[t, pid] * scale
            persons.append(
                {
                    "id": pid,
                    "keypoints": [[float(x), float(y), 1.0] for x, y in pixels],
                }
            )
        frames.append({"index": t, "persons": persons})
    return {"image_size": [width, height], "frames": frames}


def generate_dataset(cfg: SynthConfig, n_per_class: int, out_dir) -> Path:
    """Write keypoint JSON files plus a manifest; returns the manifest path.

    Manifest entries carry both the class label and a score drawn
    uniformly from the class's bin, so the same files serve
    classification and regression runs.
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for klass in CLASS_NAMES:
        for index in range(n_per_class):
            seq = generate_dyad_sequence(cfg, klass, index)
            name = f"{seq.source_id}.json"
            doc = sequence_to_document(seq, cfg.image_size)
            (out_dir / name).write_text(json.dumps(doc, separators=(",", ":")))
            entries.append(
                {"path": name, "label_class": klass, "label_score": seq.label_score}
            )
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n")
    return manifest
