"""Attentive cross-modal connection (AttX) block.

Shapes: each modality's stage output ``Z_i`` is ``(..., n, m)`` with ``n``
channels and ``m`` time steps; any leading axes (usually the batch) are
carried through untouched. Modality indices are 0-based in the Python API
and 1-based in the string form of a connection type (``"2->1"``).

The block

1. stacks the ``d`` modality maps into ``S`` of shape ``(..., n, m, d)``,
2. projects ``U = relu(S @ W)`` with ``W`` of shape ``(d, d)``,
3. moves the modality axis in front of time, scales every time step by the
   learned vector ``w_u`` (length ``m``) and applies a softmax across
   modalities, giving ``theta`` of shape ``(..., n, d, m)``,
4. weights each source modality ``Zhat_k = theta[..., k, :] * Z_k``,
5. routes: the receiver ``i`` of edges ``k -> i`` gets ``Z_i`` concatenated
   on the channel axis with every ``Zhat_k`` (ascending ``k``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError
from .numerics import Tensor

CHANNEL_AXIS = -2


@dataclass(frozen=True)
class ConnectionType:
    """Set of directed sharing edges ``(source, target)``, 0-based."""

    edges: frozenset

    def __post_init__(self):
        edges = frozenset((int(s), int(t)) for s, t in self.edges)
        if not edges:
            raise ConfigurationError("connection type needs at least one edge")
        for s, t in edges:
            if s == t:
                raise ConfigurationError(f"self-edge {s + 1}->{t + 1} is not allowed")
            if s < 0 or t < 0:
                raise ConfigurationError(f"negative modality index in edge {(s, t)}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def of(cls, *edges: tuple[int, int]) -> "ConnectionType":
        return cls(frozenset(edges))

    @property
    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    @property
    def max_index(self) -> int:
        return max(max(e) for e in self.edges)

    def sources_for(self, target: int) -> list[int]:
        return sorted(s for s, t in self.edges if t == target)

    def indegree(self, target: int) -> int:
        return sum(1 for _, t in self.edges if t == target)

    def validate(self, d: int) -> None:
        if self.max_index >= d:
            raise ConfigurationError(
                f"connection type {self} references modality {self.max_index + 1} but only {d} are wired"
            )

    def __str__(self) -> str:
        if self.edges == {(0, 1), (1, 0)}:
            return "1<->2"
        return ",".join(f"{s + 1}->{t + 1}" for s, t in self.sorted_edges)

    @classmethod
    def parse(cls, text: str) -> "ConnectionType":
        """Parse ``"1->2"``, ``"1<->2"``, ``"2->1,2->3"`` or the aliases I/II/III."""
        alias = {"I": "1->2", "II": "2->1", "III": "1<->2"}
        text = alias.get(text.strip().upper(), text)
        edges = set()
        for part in text.split(","):
            part = part.strip()
            try:
                if "<->" in part:
                    a, b = (int(v) - 1 for v in part.split("<->"))
                    edges |= {(a, b), (b, a)}
                elif "->" in part:
                    a, b = (int(v) - 1 for v in part.split("->"))
                    edges.add((a, b))
                else:
                    raise ValueError(part)
            except ValueError:
                raise ConfigurationError(f"cannot parse connection type {text!r}") from None
        return cls(frozenset(edges))


TYPE_I = ConnectionType.of((0, 1))
TYPE_II = ConnectionType.of((1, 0))
TYPE_III = ConnectionType.of((0, 1), (1, 0))


def format_stages(stages) -> str:
    return "[" + ",".join(str(s) for s in sorted(stages)) + "]"


def parse_stages(text: str) -> frozenset:
    body = text.strip().strip("[]").strip()
    if not body:
        return frozenset()
    try:
        return frozenset(int(v) for v in body.split(","))
    except ValueError:
        raise ConfigurationError(f"cannot parse stage set {text!r}") from None


# --------------------------------------------------------------------------
# the block, step by step


def stack_modalities(z_list: Sequence[Tensor]) -> Tensor:
    if len(z_list) < 2:
        raise ConfigurationError(f"AttX needs at least 2 modalities, got {len(z_list)}")
    shapes = [z.shape for z in z_list]
    if len(set(shapes)) != 1:
        raise ConfigurationError(
            f"modality representations differ in shape {shapes}; align them with adapt_dimensions"
        )
    return nx.stack(z_list, axis=-1)


def project(s: Tensor, w: Tensor) -> Tensor:
    if w.shape != (s.shape[-1], s.shape[-1]):
        raise ConfigurationError(f"projection matrix {w.shape} does not match {s.shape[-1]} modalities")
    return nx.relu(nx.matmul(s, w))


def attention_weights(u: Tensor, w_u: Tensor) -> Tensor:
    """Softmax over the modality axis of the time-scaled projection."""
    m = u.shape[-2]
    if w_u.shape != (m,):
        raise ConfigurationError(f"scoring vector {w_u.shape} does not match time extent {m}")
    nd = u.ndim
    perm = list(range(nd - 3)) + [nd - 3, nd - 1, nd - 2]
    ut = nx.transpose(u, perm)
    return nx.softmax(nx.mul(ut, w_u), axis=-2)


def extract_modality_weights(theta: Tensor, i: int) -> Tensor:
    d = theta.shape[-2]
    if not 0 <= i < d:
        raise ConfigurationError(f"modality index {i} out of range for {d} modalities")
    return nx.getitem(theta, (Ellipsis, i, slice(None)))


def weight_modality(theta_i: Tensor, z_i: Tensor) -> Tensor:
    if theta_i.shape != z_i.shape:
        raise ConfigurationError(f"weights {theta_i.shape} and representation {z_i.shape} differ")
    return nx.mul(theta_i, z_i)


def route(ctype: ConnectionType, z_list: Sequence[Tensor], zhat: dict | Sequence) -> list[Tensor]:
    """Next-stage inputs; receivers with no incoming edge pass ``Z_i`` through."""
    ctype.validate(len(z_list))
    out = []
    for i, z in enumerate(z_list):
        sources = ctype.sources_for(i)
        if not sources:
            out.append(z)
            continue
        out.append(nx.concat([z] + [zhat[k] for k in sources], axis=CHANNEL_AXIS))
    return out


def attx_forward(w: Tensor, w_u: Tensor, ctype: ConnectionType, z_list: Sequence[Tensor]) -> list[Tensor]:
    ctype.validate(len(z_list))
    s = stack_modalities(z_list)
    theta = attention_weights(project(s, w), w_u)
    sources = sorted({src for src, _ in ctype.edges})
    zhat = {k: weight_modality(extract_modality_weights(theta, k), z_list[k]) for k in sources}
    return route(ctype, z_list, zhat)


class AttXBlock:
    """One AttX instance: its own ``W`` (d x d) and ``w_u`` (m) for one stage."""

    def __init__(self, d: int, m: int, ctype: ConnectionType, stage: int, rng: np.random.Generator):
        if d < 2:
            raise ConfigurationError("AttX needs at least 2 modalities")
        ctype.validate(d)
        self.d, self.m, self.stage, self.ctype = d, m, stage, ctype
        self.w = nx.glorot_uniform(rng, (d, d), d, d, name=f"attx{stage}.W")
        self.w_u = nx.glorot_uniform(rng, (m,), m, 1, name=f"attx{stage}.w_u")

    def parameters(self) -> list[Tensor]:
        return [self.w, self.w_u]

    def attention(self, z_list: Sequence[Tensor]) -> Tensor:
        return attention_weights(project(stack_modalities(z_list), self.w), self.w_u)

    def __call__(self, z_list: Sequence[Tensor]) -> list[Tensor]:
        return attx_forward(self.w, self.w_u, self.ctype, z_list)


# --------------------------------------------------------------------------
# dimension alignment


class DimensionAdapter:
    """Align ``(n_i, m_i)`` maps to the common ``(max n, max m)``.

    Channels go through a learned kernel-1 convolution, time through
    nearest-neighbour resampling. Modalities already at the target shape are
    returned as the very same tensor object and own no parameters.
    """

    def __init__(self, shapes: Sequence[tuple[int, int]], rng: np.random.Generator | None = None, name="adapt"):
        self.shapes = [tuple(s) for s in shapes]
        self.n = max(s[0] for s in self.shapes)
        self.m = max(s[1] for s in self.shapes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs: dict[int, tuple[Tensor, Tensor]] = {}
        self.index: dict[int, np.ndarray] = {}
        for i, (n_i, m_i) in enumerate(self.shapes):
            if n_i != self.n:
                k = nx.glorot_uniform(rng, (self.n, n_i, 1), n_i, self.n, name=f"{name}{i}.kernel")
                b = nx.zeros(self.n, requires_grad=True, name=f"{name}{i}.bias")
                self.convs[i] = (k, b)
            if m_i != self.m:
                self.index[i] = np.minimum(((np.arange(self.m) + 0.5) * m_i / self.m).astype(int), m_i - 1)

    @property
    def is_identity(self) -> bool:
        return not self.convs and not self.index

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.convs.values() for p in pair]

    def __call__(self, z_list: Sequence[Tensor]) -> list[Tensor]:
        out = []
        for i, z in enumerate(z_list):
            if i in self.convs:
                z = nx.conv1d(z, *self.convs[i])
            if i in self.index:
                z = nx.take(z, self.index[i], axis=-1)
            out.append(z)
        return out


def adapt_dimensions(z_list: Sequence[Tensor], rng: np.random.Generator | None = None) -> list[Tensor]:
    """One-shot alignment with a freshly initialised :class:`DimensionAdapter`."""
    adapter = DimensionAdapter([z.shape[-2:] for z in z_list], rng)
    return adapter(z_list)


# --------------------------------------------------------------------------
# connection-type search space


def enumerate_connection_types(d: int) -> list[ConnectionType]:
    """All ``2**d - 1`` types: every nonempty source subset shares to all others."""
    if d < 2:
        raise ConfigurationError(f"need at least 2 modalities, got {d}")
    types = []
    for size in range(1, d + 1):
        for subset in itertools.combinations(range(d), size):
            types.append(ConnectionType(frozenset((q, t) for q in subset for t in range(d) if t != q)))
    return types


def greedy_candidates(d: int, best_pair_type: ConnectionType) -> list[ConnectionType]:
    """Extensions of a two-modality winner to ``d`` modalities.

    For every winning edge ``s -> t`` one candidate lets ``s`` also share to
    each extra modality, the other lets each extra modality also share to
    ``t``. A winner ``2->1`` with ``d = 3`` yields ``2->1,2->3`` and
    ``2->1,3->1``.
    """
    if d < 3:
        raise ConfigurationError("greedy search applies to 3 or more modalities")
    if best_pair_type.max_index > 1:
        raise ConfigurationError(f"pair winner {best_pair_type} must only involve modalities 1 and 2")
    extra = range(2, d)
    base = set(best_pair_type.edges)
    by_source = base | {(s, k) for s, _ in base for k in extra}
    by_target = base | {(k, t) for _, t in base for k in extra}
    out = []
    for edges in (by_source, by_target):
        c = ConnectionType(frozenset(edges))
        if c not in out:
            out.append(c)
    return out


def select_best(scored: Sequence[tuple[ConnectionType, float]]) -> ConnectionType:
    """Highest score; ties go to fewer edges, then lexicographic edge order."""
    assert scored, "no candidates to select from"
    return min(scored, key=lambda cs: (-cs[1], len(cs[0].edges), cs[0].sorted_edges))[0]


def greedy_type_search(
    d: int, best_pair_type: ConnectionType, evaluate: Callable[[ConnectionType], float]
) -> ConnectionType:
    candidates = greedy_candidates(d, best_pair_type)
    return select_best([(c, float(evaluate(c))) for c in candidates])
