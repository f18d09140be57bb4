"""Sample-length estimation and sequence packing.

Packing groups samples into knapsacks whose token totals stay under the
training max length L.  Three methods are provided:

* ``balanced``: pre-opens ceil(total/L) + delta knapsacks and always
  fills the currently shortest one, trading packing efficiency for
  uniform fill and a mix of long and short samples per knapsack.
* ``greedy``: sequential first-fit-decreasing that never reopens a
  closed knapsack; the common baseline, prone to grouping long and
  short samples separately.
* ``spfhp``: shortest-pack-first; each sample goes to the shortest
  already-open pack that still fits.

Image tokens follow the tiled-encoder accounting: a (rows x cols) tile
grid costs (rows*cols + 1) * 256 tokens including the thumbnail tile.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .corpus import Sample, ValidationError, canonical_json, ceil_div

METHOD_BALANCED = "balanced"
METHOD_GREEDY = "greedy"
METHOD_SPFHP = "spfhp"

MAX_TILES = 12
TILE_EDGE = 448
TOKENS_PER_TILE = 256
DEFAULT_DELTA = 20
DEFAULT_CHUNK_SIZE = 4096


@dataclass
class TileGrid:
    rows: int
    cols: int

    @property
    def tiles(self) -> int:
        return self.rows * self.cols


@dataclass
class PackStats:
    count: int
    total_mean: float
    total_std: float
    max_length_std: float
    efficiency: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "total_mean": self.total_mean,
            "total_std": self.total_std,
            "max_length_std": self.max_length_std,
            "efficiency": self.efficiency,
        }


@dataclass
class PackPlan:
    method: str
    capacity: int
    delta: int
    knapsacks: list[list[tuple[str, int]]]
    unused_knapsacks: int = 0

    def lengths(self) -> list[list[int]]:
        return [[length for _, length in ks] for ks in self.knapsacks]

    def totals(self) -> list[int]:
        return [sum(length for _, length in ks) for ks in self.knapsacks]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "capacity": self.capacity,
            "delta": self.delta,
            "knapsacks": [[[sid, length] for sid, length in ks] for ks in self.knapsacks],
            "unused_knapsacks": self.unused_knapsacks,
            "stats": pack_stats(self).to_dict() if self.knapsacks else None,
        }


def select_tile_grid(width: int, height: int, max_tiles: int = MAX_TILES) -> TileGrid:
    """Choose the tile grid whose aspect ratio best matches the image.

    Minimizes |log(width/height) - log(cols/rows)| over grids with at
    most ``max_tiles`` tiles.  Ties go to the larger grid only when the
    image has more pixels than that grid can display.
    """
    if width < 1 or height < 1:
        raise ValidationError("image dimensions must be positive")
    target = math.log(width / height)
    area = width * height
    best: Optional[TileGrid] = None
    best_err = math.inf
    candidates = sorted(
        ((rows, cols) for rows in range(1, max_tiles + 1) for cols in range(1, max_tiles + 1)
         if rows * cols <= max_tiles),
        key=lambda rc: (rc[0] * rc[1], rc[0]),
    )
    for rows, cols in candidates:
        err = abs(target - math.log(cols / rows))
        if err < best_err - 1e-12:
            best = TileGrid(rows=rows, cols=cols)
            best_err = err
        elif abs(err - best_err) <= 1e-12 and rows * cols > best.tiles:
            if area > rows * cols * TILE_EDGE * TILE_EDGE:
                best = TileGrid(rows=rows, cols=cols)
    return best


def estimate_image_tokens(grid: TileGrid) -> int:
    """Token cost of a tiled image: one thumbnail tile plus the grid."""
    if grid.rows < 1 or grid.cols < 1 or grid.tiles > MAX_TILES:
        raise ValidationError(f"invalid tile grid {grid.rows}x{grid.cols}")
    return (grid.tiles + 1) * TOKENS_PER_TILE


def chars_per_token_estimate(text: str) -> int:
    """Cheap tokenizer stand-in: about four characters per token."""
    return ceil_div(len(text), 4) if text else 0


def estimate_sample_length(
    sample: Sample, tokenizer: Callable[[str], int] = chars_per_token_estimate
) -> int:
    """Token length of a sample: the stored value when present, else text
    tokens plus tiled-image tokens (unknown dims count as a 1x1 grid)."""
    if sample.token_length is not None:
        return sample.token_length
    total = sum(tokenizer(turn.text) for turn in sample.turns)
    for image in sample.images:
        if image.width and image.height:
            grid = select_tile_grid(image.width, image.height)
        else:
            warnings.warn(
                "image without dimensions; assuming a 1x1 tile grid", stacklevel=2
            )
            grid = TileGrid(rows=1, cols=1)
        total += estimate_image_tokens(grid)
    return total


def _check_lengths(lengths: Sequence[int], capacity: int) -> None:
    for i, length in enumerate(lengths):
        if length <= 0:
            raise ValidationError(f"sample {i}: nonpositive length {length}")
        if length > capacity:
            raise ValidationError(f"sample {i}: length {length} exceeds capacity {capacity}")


def _ids_or_indices(lengths: Sequence[int], ids: Optional[Sequence[str]]) -> list[str]:
    if ids is None:
        return [str(i) for i in range(len(lengths))]
    if len(ids) != len(lengths):
        raise ValidationError("ids and lengths differ in length")
    return list(ids)


def _sorted_desc(lengths: Sequence[int], ids: list[str]) -> list[tuple[str, int]]:
    # Stable descending sort: ties keep original order.
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    return [(ids[i], lengths[i]) for i in order]


def balanced_knapsack(
    lengths: Sequence[int],
    capacity: int,
    delta: int = 0,
    ids: Optional[Sequence[str]] = None,
) -> PackPlan:
    """Balance-aware greedy packing.

    Opens ceil(total/capacity) + delta knapsacks up front, then walks the
    samples in descending length order, placing each into the currently
    shortest knapsack when it fits and opening a fresh knapsack when it
    does not.  The shortest-knapsack pointer is recomputed after every
    placement or append, ties resolving to the lowest index.  Knapsacks
    left empty are dropped from the plan but counted.
    """
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    _check_lengths(lengths, capacity)
    all_ids = _ids_or_indices(lengths, ids)
    if not lengths:
        return PackPlan(METHOD_BALANCED, capacity, delta, [])

    items = _sorted_desc(lengths, all_ids)
    total = sum(lengths)
    min_knapsacks = ceil_div(total, capacity) + delta
    knapsacks: list[list[tuple[str, int]]] = [[] for _ in range(min_knapsacks)]
    totals = [0] * min_knapsacks

    ks_index = 0
    sample_index = 0
    while sample_index < len(items):
        sid, length = items[sample_index]
        if totals[ks_index] + length <= capacity:
            knapsacks[ks_index].append((sid, length))
            totals[ks_index] += length
            sample_index += 1
        else:
            knapsacks.append([])
            totals.append(0)
        ks_index = min(range(len(totals)), key=totals.__getitem__)

    filled = [ks for ks in knapsacks if ks]
    return PackPlan(
        METHOD_BALANCED, capacity, delta, filled, unused_knapsacks=len(knapsacks) - len(filled)
    )


def naive_greedy_knapsack(
    lengths: Sequence[int], capacity: int, ids: Optional[Sequence[str]] = None
) -> PackPlan:
    """Sequential greedy baseline: fill one knapsack at a time in
    descending length order, closing it for good on the first overflow."""
    _check_lengths(lengths, capacity)
    all_ids = _ids_or_indices(lengths, ids)
    if not lengths:
        return PackPlan(METHOD_GREEDY, capacity, 0, [])

    items = _sorted_desc(lengths, all_ids)
    knapsacks: list[list[tuple[str, int]]] = [[]]
    running = 0
    for sid, length in items:
        if running + length > capacity:
            knapsacks.append([])
            running = 0
        knapsacks[-1].append((sid, length))
        running += length
    return PackPlan(METHOD_GREEDY, capacity, 0, knapsacks)


def spfhp(
    lengths: Sequence[int], capacity: int, ids: Optional[Sequence[str]] = None
) -> PackPlan:
    """Shortest-pack-first packing: each sample (descending) goes to the
    currently shortest open pack that still fits, lowest index on ties;
    a new pack opens only when none fits."""
    _check_lengths(lengths, capacity)
    all_ids = _ids_or_indices(lengths, ids)
    if not lengths:
        return PackPlan(METHOD_SPFHP, capacity, 0, [])

    items = _sorted_desc(lengths, all_ids)
    knapsacks: list[list[tuple[str, int]]] = []
    totals: list[int] = []
    for sid, length in items:
        target = -1
        target_total = None
        for i, t in enumerate(totals):
            if t + length <= capacity and (target_total is None or t < target_total):
                target = i
                target_total = t
        if target < 0:
            knapsacks.append([])
            totals.append(0)
            target = len(totals) - 1
        knapsacks[target].append((sid, length))
        totals[target] += length
    return PackPlan(METHOD_SPFHP, capacity, 0, knapsacks)


_METHODS = {
    METHOD_BALANCED: lambda lengths, capacity, delta, ids: balanced_knapsack(
        lengths, capacity, delta, ids
    ),
    METHOD_GREEDY: lambda lengths, capacity, delta, ids: naive_greedy_knapsack(
        lengths, capacity, ids
    ),
    METHOD_SPFHP: lambda lengths, capacity, delta, ids: spfhp(lengths, capacity, ids),
}


def pack_stats(plan: PackPlan) -> PackStats:
    """Population statistics over knapsack totals and per-knapsack max
    sample lengths, plus fill efficiency."""
    if not plan.knapsacks:
        raise ValidationError("pack_stats: empty plan")
    totals = plan.totals()
    maxima = [max(length for _, length in ks) for ks in plan.knapsacks]
    total_length = sum(totals)
    return PackStats(
        count=len(totals),
        total_mean=_mean(totals),
        total_std=_pstd(totals),
        max_length_std=_pstd(maxima),
        efficiency=total_length / (len(totals) * plan.capacity),
    )


def _mean(values: Sequence[int]) -> float:
    return sum(values) / len(values)


def _pstd(values: Sequence[int]) -> float:
    m = _mean(values)
    return math.sqrt(sum((v - m) ** 2 for v in values) / len(values))


def expand_repeats(pool: Sequence[Sample]) -> tuple[list[str], list[Sample]]:
    """Replay each sample repeat_factor times, in pool order."""
    ids: list[str] = []
    samples: list[Sample] = []
    for sample in pool:
        for _ in range(sample.repeat_factor):
            ids.append(sample.id)
            samples.append(sample)
    return ids, samples


def pack_pool(
    pool: Sequence[Sample],
    capacity: int,
    delta: int = 0,
    method: str = METHOD_BALANCED,
    tokenizer: Callable[[str], int] = chars_per_token_estimate,
) -> PackPlan:
    if method not in _METHODS:
        raise ValidationError(f"unknown packing method {method!r}")
    ids, samples = expand_repeats(pool)
    lengths = [estimate_sample_length(s, tokenizer) for s in samples]
    return _METHODS[method](lengths, capacity, delta, ids)


def chunked_pack(
    pool: Sequence[Sample],
    capacity: int,
    delta: int = 0,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    method: str = METHOD_BALANCED,
    tokenizer: Callable[[str], int] = chars_per_token_estimate,
) -> PackPlan:
    """Pack the pool in consecutive chunks of ``chunk_size`` samples and
    concatenate the per-chunk plans.  Chunking bounds the argmin scans on
    multi-million-sample corpora without changing per-chunk semantics."""
    if chunk_size < 1:
        raise ValidationError("chunk_size must be >= 1")
    if method not in _METHODS:
        raise ValidationError(f"unknown packing method {method!r}")
    ids, samples = expand_repeats(pool)
    lengths = [estimate_sample_length(s, tokenizer) for s in samples]

    knapsacks: list[list[tuple[str, int]]] = []
    unused = 0
    for start in range(0, len(lengths), chunk_size):
        stop = min(start + chunk_size, len(lengths))
        plan = _METHODS[method](lengths[start:stop], capacity, delta, ids[start:stop])
        knapsacks.extend(plan.knapsacks)
        unused += plan.unused_knapsacks
    return PackPlan(method, capacity, delta, knapsacks, unused_knapsacks=unused)


@dataclass
class SeparatorPolicy:
    boundary: str = "<|pack_boundary|>"
    include: bool = True


def materialize_packs(
    pool: Sequence[Sample],
    plan: PackPlan,
    separator: Optional[SeparatorPolicy] = None,
    tokenizer: Callable[[str], int] = chars_per_token_estimate,
) -> list[dict]:
    """Expand a plan into packed records.

    Each record lists the member sample ids in order and concatenates
    their conversations, with a boundary marker between samples.  Totals
    are re-asserted against the plan capacity.
    """
    separator = separator or SeparatorPolicy()
    by_id = {s.id: s for s in pool}
    packed = []
    for index, ks in enumerate(plan.knapsacks):
        conversations: list[dict] = []
        images: list[dict] = []
        total = 0
        member_ids = []
        for pos, (sid, length) in enumerate(ks):
            sample = by_id.get(sid)
            if sample is None:
                raise ValidationError(f"plan references unknown sample {sid!r}")
            estimated = estimate_sample_length(sample, tokenizer)
            total += estimated
            member_ids.append(sid)
            if pos > 0 and separator.include:
                conversations.append({"from": "boundary", "value": separator.boundary})
            conversations.extend(
                {"from": t.role.value, "value": t.text} for t in sample.turns
            )
            for im in sample.images:
                entry = {"path": im.path}
                if im.width is not None:
                    entry["width"] = im.width
                if im.height is not None:
                    entry["height"] = im.height
                images.append(entry)
        if total > plan.capacity:
            raise ValidationError(
                f"knapsack {index} length {total} exceeds capacity {plan.capacity}"
            )
        packed.append(
            {
                "id": f"pack-{index:06d}",
                "sample_ids": member_ids,
                "conversations": conversations,
                "images": images,
                "total_length": total,
            }
        )
    return packed


def write_packed(packed: Sequence[dict], path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in packed:
            f.write(canonical_json(record) + "\n")
