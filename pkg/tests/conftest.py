import numpy as np

from sroc_lab.manifest import SampleRecord, save_manifest
from sroc_lab.tensors import EmbeddingSet, FeatureLevel, save_array_npy


def make_set(rng, n, specs):
    """Random EmbeddingSet with one level per (h, w, c) spec."""
    levels = tuple(
        FeatureLevel(i, rng.standard_normal((n, h, w, c)).astype(np.float32))
        for i, (h, w, c) in enumerate(specs)
    )
    return EmbeddingSet(
        sample_ids=tuple(f"s{i:03d}" for i in range(n)), levels=levels
    )


def write_fixture(tmp_path, rng, n, specs):
    """Write a minimal manifest + level NPY files; returns (manifest, paths)."""
    records = [SampleRecord(id=f"s{i:03d}", split="train") for i in range(n)]
    save_manifest(records, tmp_path / "manifest.json")
    paths = []
    for j, (h, w, c) in enumerate(specs):
        arr = rng.standard_normal((n, h, w, c)).astype(np.float32)
        path = tmp_path / f"level{j}.npy"
        save_array_npy(arr, path)
        paths.append(path)
    return tmp_path / "manifest.json", paths
