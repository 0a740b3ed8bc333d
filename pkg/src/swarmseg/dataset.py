"""On-disk dataset layout.

::

    <root>/manifest.json              world config, seed, agent count, sample dirs
    <root>/sample_0000/sample.json    sample seed and viewports
    <root>/sample_0000/agent_0.bin    observation, gt_mask, obstruction (tensor file)
    <root>/sample_0000/correspondences.bin   one entry "corr.T.S" per ordered pair
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import WorldConfig
from .errors import DataError
from .grid import load_tensors, save_tensors
from .world import SceneSample, Viewport

MANIFEST = "manifest.json"
LAYOUT_VERSION = 1


def _as3(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(a.shape[0], a.shape[1], -1)


def save_sample(sample: SceneSample, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for a in range(sample.n_agents):
        save_tensors(
            d / f"agent_{a}.bin",
            {
                "observation": sample.observations[a],
                "gt_mask": _as3(sample.gt_masks[a]),
                "obstruction": _as3(sample.obstruction_masks[a]),
            },
        )
    save_tensors(d / "correspondences.bin", {f"corr.{t}.{s}": _as3(g) for (t, s), g in sorted(sample.correspondences.items())})
    meta = {
        "seed": int(sample.seed),
        "n_agents": sample.n_agents,
        "feat_rows": sample.feat_rows,
        "feat_cols": sample.feat_cols,
        "viewports": [asdict(vp) for vp in sample.viewports],
    }
    (d / "sample.json").write_text(json.dumps(meta, indent=2))


def load_sample(directory: str | Path) -> SceneSample:
    d = Path(directory)
    try:
        meta = json.loads((d / "sample.json").read_text())
        agents = [load_tensors(d / f"agent_{a}.bin") for a in range(meta["n_agents"])]
        corr = load_tensors(d / "correspondences.bin")
    except FileNotFoundError as exc:
        raise DataError(f"incomplete sample directory {d}: {exc.filename}") from None
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"bad sample metadata in {d}: {exc}") from None
    correspondences = {}
    for name, arr in corr.items():
        _, t, s = name.split(".")
        correspondences[(int(t), int(s))] = arr[..., 0].astype(np.int64)
    return SceneSample(
        observations=[a["observation"] for a in agents],
        gt_masks=[a["gt_mask"][..., 0].astype(np.int64) for a in agents],
        obstruction_masks=[a["obstruction"][..., 0] > 0.5 for a in agents],
        correspondences=correspondences,
        viewports=[Viewport(vp["agent_id"], tuple(vp["origin"]), vp["rotation"], vp["view_rows"], vp["view_cols"]) for vp in meta["viewports"]],
        feat_rows=meta["feat_rows"],
        feat_cols=meta["feat_cols"],
        seed=meta["seed"],
    )


def save_dataset(samples: list[SceneSample], root: str | Path, world: WorldConfig, seed: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:04d}"
        save_sample(sample, root / name)
        dirs.append(name)
    manifest = {
        "layout_version": LAYOUT_VERSION,
        "seed": seed,
        "n_agents": samples[0].n_agents if samples else world.n_agents,
        "view": [world.view_rows, world.view_cols],
        "feat": [world.feat_rows, world.feat_cols],
        "n_classes": world.n_classes,
        "world": asdict(world),
        "samples": dirs,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return root


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"dataset manifest {path} is not valid JSON: {exc}") from None
    if manifest.get("layout_version") != LAYOUT_VERSION:
        raise DataError(f"unsupported dataset layout version {manifest.get('layout_version')}")
    return manifest


def load_dataset(root: str | Path) -> tuple[list[SceneSample], WorldConfig]:
    manifest = load_manifest(root)
    world = WorldConfig(**manifest["world"])
    samples = [load_sample(Path(root) / name) for name in manifest["samples"]]
    if not samples:
        raise DataError(f"dataset {root} has no samples")
    return samples, world
