"""
Frame chain: named coordinate frames joined by rigid links.

A link (source, target, T) maps coordinates expressed in `source` into
`target`. Resolving walks the links in either direction, inverting the ones
traversed backwards.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from carmpose.core.geometry import RigidTransform, compose, invert
from carmpose.errors import DisconnectedChainError, UnknownFrameError

# Frame names used by the acquisition simulator
OBJECT = "object"
BOARD = "board"
OPTICAL_CAMERA = "optical_camera"
XRAY_SOURCE = "xray_source"


@dataclass(frozen=True)
class FrameLink:
    """Rigid link from one frame to another."""
    source: str
    target: str
    transform: RigidTransform


@dataclass(frozen=True)
class FrameChain:
    """Ordered collection of frame links."""
    links: tuple[FrameLink, ...] = field(default_factory=tuple)

    @classmethod
    def from_links(cls, *links: tuple[str, str, RigidTransform]) -> "FrameChain":
        return cls(tuple(FrameLink(s, t, tf) for s, t, tf in links))

    def with_link(self, source: str, target: str, transform: RigidTransform) -> "FrameChain":
        return FrameChain(self.links + (FrameLink(source, target, transform),))

    @property
    def frames(self) -> list[str]:
        names: list[str] = []
        for link in self.links:
            for name in (link.source, link.target):
                if name not in names:
                    names.append(name)
        return names

    def resolve(self, source: str, target: str) -> RigidTransform:
        return chain_resolve(self, source, target)


def chain_resolve(chain: FrameChain, source: str, target: str) -> RigidTransform:
    """
    Transform taking coordinates in `source` into `target`.

    Breadth-first over links; a link used backwards contributes its inverse.
    """
    known = chain.frames
    for name in (source, target):
        if name not in known:
            raise UnknownFrameError(f"unknown frame '{name}' (known: {', '.join(known)})")
    if source == target:
        return RigidTransform.identity()

    adjacency: dict[str, list[tuple[str, RigidTransform]]] = {name: [] for name in known}
    for link in chain.links:
        adjacency[link.source].append((link.target, link.transform))
        adjacency[link.target].append((link.source, invert(link.transform)))

    # Each entry maps the start frame into the visited frame.
    reached: dict[str, RigidTransform] = {source: RigidTransform.identity()}
    queue = deque([source])
    while queue:
        frame = queue.popleft()
        for neighbor, step in adjacency[frame]:
            if neighbor in reached:
                continue
            reached[neighbor] = compose(step, reached[frame])
            if neighbor == target:
                return reached[neighbor]
            queue.append(neighbor)

    raise DisconnectedChainError(f"no path of links from '{source}' to '{target}'")
