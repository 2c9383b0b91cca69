"""Synthetic interaction-log generator with planted preference structure.

Users belong to hidden groups, items to categories, and a random binary
affinity grid decides which categories each group favors. Logged events
are implicit positives drawn mostly from favored categories, with an
exploration fraction from the rest. Item titles embed the category word,
so text similarity clusters interactions by (history pattern, category);
user attributes carry no signal on purpose. The grid is sampled per seed,
which keeps the mapping memorization-resistant across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Interaction
from .util import rng_for, write_ndjson

CATEGORY_WORDS = ("amber", "basalt", "coral", "dune", "ember", "fjord",
                  "grove", "heath", "inlet", "juniper", "kelp", "loess")
STYLE_WORDS = ("classic", "compact", "deluxe", "field", "heritage",
               "midline", "prime", "sierra", "travel", "urban")


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    n_groups: int = 6
    n_categories: int = 6
    events_min: int = 6
    events_mean: float = 12.0
    p_explore: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_categories > len(CATEGORY_WORDS):
            raise ValueError(f"at most {len(CATEGORY_WORDS)} categories supported")
        if not 0.0 <= self.p_explore < 0.5:
            raise ValueError(f"p_explore must be in [0, 0.5), got {self.p_explore}")
        if self.events_min < 3:
            raise ValueError("users need at least 3 events to survive the split")
        if self.n_items < self.n_categories:
            raise ValueError("need at least one item per category")


def affinity_grid(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary (groups x categories) grid; every row mixes liked and disliked."""
    grid = rng.random((config.n_groups, config.n_categories)) < 0.5
    for g in range(config.n_groups):
        if grid[g].all() or not grid[g].any():
            flip = int(rng.integers(config.n_categories))
            grid[g, flip] = not grid[g, flip]
    return grid


def generate(config: SynthConfig) -> list[Interaction]:
    """Deterministic synthetic log, sorted by (user, timestamp)."""
    rng = rng_for(config.seed, "synth")
    grid = affinity_grid(config, rng)

    item_cat = np.arange(config.n_items) % config.n_categories
    items_by_cat = [np.nonzero(item_cat == c)[0] for c in range(config.n_categories)]
    item_attrs = []
    for j in range(config.n_items):
        cat = CATEGORY_WORDS[item_cat[j]]
        style = STYLE_WORDS[int(rng.integers(len(STYLE_WORDS)))]
        item_attrs.append({"title": f"{cat} {style} {j:04d}", "category": cat})

    groups = rng.integers(0, config.n_groups, size=config.n_users)
    segments = rng.integers(0, 4, size=config.n_users)  # uninformative by design

    interactions: list[Interaction] = []
    extra = max(config.events_mean - config.events_min, 0.0)
    for u in range(config.n_users):
        n_events = config.events_min + int(rng.poisson(extra))
        liked = np.nonzero(grid[groups[u]])[0]
        other = np.nonzero(~grid[groups[u]])[0]
        user_id = f"u{u:05d}"
        attrs = {"segment": f"seg{segments[u]}"}
        for k in range(n_events):
            pool = other if (other.size and rng.random() < config.p_explore) else liked
            cat = int(pool[rng.integers(pool.size)])
            j = int(items_by_cat[cat][rng.integers(items_by_cat[cat].size)])
            interactions.append(Interaction(
                user_id=user_id,
                item_id=f"i{j:04d}",
                timestamp=k * 100000 + u,
                user_attrs=attrs,
                item_attrs=item_attrs[j],
            ))
    return interactions


def write_interactions(path: str, interactions: list[Interaction]) -> None:
    """NDJSON rows in the shape the data loader ingests."""
    write_ndjson(path, ({
        "user_id": it.user_id,
        "item_id": it.item_id,
        "timestamp": it.timestamp,
        "user_attrs": it.user_attrs,
        "item_attrs": it.item_attrs,
    } for it in interactions))
