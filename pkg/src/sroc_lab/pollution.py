"""Polluted training-set construction.

A pollution pool of defective validation samples sized at 20% of the training
set is drawn once per seed, with per-defect-type counts proportional to the
validation distribution (largest-remainder rounding). Pool samples are
withheld from validation whether injected or not, so the training set keeps
its size and validation never leaks pool images.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CategoryExcludedError, ConfigError, DataError
from .manifest import SampleRecord

POOL_FRACTION = 0.2
MAX_POLLUTION = 0.2


@dataclass(frozen=True)
class PollutionPlan:
    category: str
    pollution_ratio: float
    seed: int
    train_ids: tuple[str, ...]  # original training ids, manifest order
    val_ids: tuple[str, ...]  # final validation ids (pool removed)
    pollution_pool: tuple[str, ...]
    replaced_train_ids: tuple[str, ...]
    injected_ids: tuple[str, ...]

    def polluted_train_ids(self) -> tuple[str, ...]:
        """Training ids after replacement, preserving manifest positions:
        the i-th replaced slot receives the i-th injected id."""
        substitution = dict(zip(self.replaced_train_ids, self.injected_ids))
        return tuple(substitution.get(tid, tid) for tid in self.train_ids)

    def to_json(self) -> str:
        """Canonical serialization; identical plans give identical bytes."""
        doc = {
            "category": self.category,
            "pollution_ratio": self.pollution_ratio,
            "seed": self.seed,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "pollution_pool": list(self.pollution_pool),
            "replaced_train_ids": list(self.replaced_train_ids),
            "injected_ids": list(self.injected_ids),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PollutionPlan":
        doc = json.loads(text)
        return cls(
            category=doc["category"],
            pollution_ratio=doc["pollution_ratio"],
            seed=doc["seed"],
            train_ids=tuple(doc["train_ids"]),
            val_ids=tuple(doc["val_ids"]),
            pollution_pool=tuple(doc["pollution_pool"]),
            replaced_train_ids=tuple(doc["replaced_train_ids"]),
            injected_ids=tuple(doc["injected_ids"]),
        )


def derive_seed(master: int, *keys: int | str) -> int:
    """Expand a master seed into an independent per-key stream seed.

    Strings are folded in via crc32 so (master, category, index) tuples give
    stable, order-independent streams across parallel workers.
    """
    ints = [master & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            ints.append(zlib.crc32(key.encode("utf-8")))
        else:
            ints.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def largest_remainder_counts(
    weights: Sequence[int], total: int, caps: Sequence[int] | None = None
) -> list[int]:
    """Integer allocation of `total` proportional to `weights` by the
    largest-remainder method, optionally capped per entry."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise DataError("cannot allocate proportionally to zero weights")
    caps_arr = (
        np.full(weights.size, total) if caps is None else np.asarray(caps, dtype=int)
    )
    if caps_arr.sum() < total:
        raise DataError(
            f"caps admit only {caps_arr.sum()} items, need {total}"
        )
    exact = weights / weights.sum() * total
    counts = np.minimum(np.floor(exact).astype(int), caps_arr)
    remainders = exact - counts
    # hand out the leftover units by descending remainder, index breaking ties
    order = np.lexsort((np.arange(weights.size), -remainders))
    short = total - counts.sum()
    for idx in list(order) * (int(short) // weights.size + 1):
        if short == 0:
            break
        if counts[idx] < caps_arr[idx]:
            counts[idx] += 1
            short -= 1
    return [int(c) for c in counts]


def build_pollution_plan(
    manifest: Sequence[SampleRecord],
    category: str,
    pollution_ratio: float,
    seed: int,
) -> PollutionPlan:
    """Draw the pollution pool and the train replacements for one seed.

    Raises CategoryExcludedError when the validation split cannot supply the
    pool while keeping at least one defective sample for evaluation.
    """
    if not 0.0 <= pollution_ratio <= MAX_POLLUTION:
        raise ConfigError(
            f"pollution_ratio must be in [0, {MAX_POLLUTION}], got {pollution_ratio}"
        )
    train_ids = tuple(r.id for r in manifest if r.split == "train")
    val_records = [r for r in manifest if r.split == "val"]
    if not train_ids or not val_records:
        raise DataError("manifest needs non-empty train and val splits")

    n = len(train_ids)
    pool_size = int(np.floor(POOL_FRACTION * n))
    defective = [r for r in val_records if r.label == "defective"]
    if len(defective) < pool_size + 1:
        raise CategoryExcludedError(
            f"category {category!r}: {len(defective)} defective validation "
            f"samples cannot supply a pool of {pool_size} while keeping any "
            "for evaluation"
        )

    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(category.encode())])
    )

    # pool with defect-type proportions matching the validation set
    by_type: dict[str, list[str]] = {}
    for r in defective:
        by_type.setdefault(r.defect_type or "unknown", []).append(r.id)
    types = sorted(by_type)
    avail = [len(by_type[t]) for t in types]
    counts = largest_remainder_counts(avail, pool_size, caps=avail)
    pool: list[str] = []
    for t, count in zip(types, counts):
        ids = by_type[t]
        chosen = rng.choice(len(ids), size=count, replace=False)
        pool.extend(ids[i] for i in np.sort(chosen))

    n_inject = int(np.floor(pollution_ratio * n))
    replaced_idx = np.sort(rng.choice(n, size=n_inject, replace=False))
    injected_idx = np.sort(rng.choice(len(pool), size=n_inject, replace=False))

    pool_set = set(pool)
    return PollutionPlan(
        category=category,
        pollution_ratio=float(pollution_ratio),
        seed=int(seed),
        train_ids=train_ids,
        val_ids=tuple(r.id for r in val_records if r.id not in pool_set),
        pollution_pool=tuple(pool),
        replaced_train_ids=tuple(train_ids[i] for i in replaced_idx),
        injected_ids=tuple(pool[i] for i in injected_idx),
    )
