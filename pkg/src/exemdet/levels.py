"""Feature-pyramid layout shared by the generator, the model, and the indexes.

Four pyramid levels (2 through 5) with fixed channel counts and a 7x7 spatial
footprint per level. Proposals are routed to a level by box height, mirroring
how detectors assign RoIs to pyramid stages: small boxes read shallow levels.
"""

from __future__ import annotations

from .geometry import Box

LEVELS: tuple[int, ...] = (2, 3, 4, 5)
LEVEL_CHANNELS: dict[int, int] = {2: 8, 3: 16, 4: 32, 5: 32}
SPATIAL: int = 7

# Height boundaries (pixels) between consecutive levels.
_ROUTE_BOUNDS: tuple[float, float, float] = (40.0, 80.0, 160.0)


def route_level(box: Box) -> int:
    """Map a proposal box to its pyramid level by height."""
    h = box.h
    if h < _ROUTE_BOUNDS[0]:
        return 2
    if h < _ROUTE_BOUNDS[1]:
        return 3
    if h < _ROUTE_BOUNDS[2]:
        return 4
    return 5
