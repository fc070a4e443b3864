"""Token layouts, symmetric block attention masks and grouped-attention plans.

A packed sequence holds ``n`` text groups followed by ``n`` video groups::

    [text_1, ..., text_n, video_1, ..., video_n]

Group ``g`` in ``0..2n-1`` indexes text groups first (``g < n``) and video
groups after (``g >= n``). Every mask variant is defined at group level by a
``2n x 2n`` boolean block matrix, which is then expanded to tokens (dense
mask) or compressed to key/value spans (grouped plan).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class LayoutError(ValueError):
    pass


class MaskFormatError(ValueError):
    pass


class MaskVariant(str, enum.Enum):
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"
    V5 = "V5"

    @classmethod
    def parse(cls, value: "str | MaskVariant") -> "MaskVariant":
        if isinstance(value, MaskVariant):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(f"unknown mask variant {value!r}; expected one of V1..V5") from None


@dataclass(frozen=True)
class SegmentLayout:
    n: int
    text_len: tuple[int, ...]
    video_len: tuple[int, ...]
    text_offset: tuple[int, ...] = field(init=False)
    video_offset: tuple[int, ...] = field(init=False)
    total_len: int = field(init=False)

    def __post_init__(self):
        if self.n < 1:
            raise LayoutError(f"n must be >= 1, got {self.n}")
        if len(self.text_len) != self.n or len(self.video_len) != self.n:
            raise LayoutError(
                f"expected {self.n} text and video lengths, got {len(self.text_len)} and {len(self.video_len)}"
            )
        if any(v < 1 for v in (*self.text_len, *self.video_len)):
            raise LayoutError(f"all lengths must be >= 1: text={self.text_len} video={self.video_len}")
        text_off = np.concatenate([[0], np.cumsum(self.text_len)[:-1]])
        n_text = int(sum(self.text_len))
        video_off = n_text + np.concatenate([[0], np.cumsum(self.video_len)[:-1]])
        object.__setattr__(self, "text_offset", tuple(int(v) for v in text_off))
        object.__setattr__(self, "video_offset", tuple(int(v) for v in video_off))
        object.__setattr__(self, "total_len", n_text + int(sum(self.video_len)))

    @property
    def num_text(self) -> int:
        return int(sum(self.text_len))

    @property
    def num_video(self) -> int:
        return int(sum(self.video_len))

    @property
    def num_groups(self) -> int:
        return 2 * self.n

    def group_span(self, g: int) -> tuple[int, int]:
        """Half-open token range ``[start, stop)`` of group ``g``."""
        if g < self.n:
            start, size = self.text_offset[g], self.text_len[g]
        else:
            start, size = self.video_offset[g - self.n], self.video_len[g - self.n]
        return start, start + size

    def spans(self) -> list[tuple[int, int]]:
        return [self.group_span(g) for g in range(self.num_groups)]

    def token_segment(self) -> np.ndarray:
        """Segment index (0-based) of every token in the packed sequence."""
        seg = np.empty(self.total_len, dtype=np.int64)
        for g, (a, b) in enumerate(self.spans()):
            seg[a:b] = g % self.n
        return seg

    def video_segment(self) -> np.ndarray:
        """Segment index of every video row, in video-only coordinates."""
        return np.repeat(np.arange(self.n), self.video_len)

    def video_slice(self, i: int) -> slice:
        """Rows of segment ``i`` inside a video-only matrix."""
        start = self.video_offset[i] - self.num_text
        return slice(start, start + self.video_len[i])

    def to_text(self) -> str:
        return format_layout(self)


def build_layout(n: int, text_lens: Sequence[int], video_lens: Sequence[int]) -> SegmentLayout:
    return SegmentLayout(int(n), tuple(int(v) for v in text_lens), tuple(int(v) for v in video_lens))


def uniform_layout(n: int, text_len: int, video_len: int) -> SegmentLayout:
    return build_layout(n, [text_len] * n, [video_len] * n)


def format_layout(layout: SegmentLayout) -> str:
    text = ",".join(str(v) for v in layout.text_len)
    video = ",".join(str(v) for v in layout.video_len)
    return f"n={layout.n}; text={text}; video={video}"


_LAYOUT_RE = re.compile(r"^\s*n\s*=\s*(\d+)\s*;\s*text\s*=\s*([\d,\s]+);\s*video\s*=\s*([\d,\s]+)$")


def parse_layout(text: str) -> SegmentLayout:
    m = _LAYOUT_RE.match(text.strip())
    if m is None:
        raise LayoutError(f"malformed layout line: {text!r}")
    n = int(m.group(1))
    text_lens = [int(v) for v in m.group(2).split(",") if v.strip()]
    video_lens = [int(v) for v in m.group(3).split(",") if v.strip()]
    return build_layout(n, text_lens, video_lens)


def block_matrix(n: int, variant: MaskVariant | str) -> np.ndarray:
    """Group-level permission matrix (``2n x 2n`` bool) for a mask variant."""
    variant = MaskVariant.parse(variant)
    blocks = np.zeros((2 * n, 2 * n), dtype=bool)
    if variant is MaskVariant.V5:
        blocks[:] = True
        return blocks
    idx = np.arange(n)
    text, video = idx, idx + n
    # V1: each (text_i, video_i) pair is an isolated block
    blocks[text, text] = True
    blocks[text, video] = True
    blocks[video, text] = True
    blocks[video, video] = True
    if variant is MaskVariant.V1:
        return blocks
    blocks[n:, n:] = True
    if variant is MaskVariant.V3:
        blocks[:n, :n] = True
    elif variant is MaskVariant.V4:
        blocks[:n, n:] = True
        blocks[n:, :n] = True
    return blocks


@dataclass(frozen=True)
class AttentionMask:
    """Binary ``L x L`` attention mask stored as packed bit rows."""

    L: int
    packed: np.ndarray = field(repr=False)

    @classmethod
    def from_dense(cls, bits: np.ndarray) -> "AttentionMask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ValueError(f"mask must be square, got shape {bits.shape}")
        packed = np.packbits(bits, axis=1)
        packed.setflags(write=False)
        return cls(bits.shape[0], packed)

    def dense(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.L).astype(bool)

    def validate(self) -> None:
        bits = self.dense()
        if not np.array_equal(bits, bits.T):
            raise ValueError("attention mask is not symmetric")
        if not bits.diagonal().all():
            raise ValueError("attention mask diagonal must be all ones")

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.L == other.L and np.array_equal(self.packed, other.packed)

    def __hash__(self):
        return hash((self.L, self.packed.tobytes()))


def build_attention_mask(layout: SegmentLayout, variant: MaskVariant | str) -> AttentionMask:
    blocks = block_matrix(layout.n, variant)
    sizes = [b - a for a, b in layout.spans()]
    # group order is also index order, so a Kronecker-style repeat lays the blocks out in place
    bits = np.repeat(np.repeat(blocks, sizes, axis=0), sizes, axis=1)
    return AttentionMask.from_dense(bits)


def mask_popcount(mask: AttentionMask) -> int:
    return int(np.bitwise_count(mask.packed).sum())


def serialize_mask(mask: AttentionMask) -> str:
    bits = mask.dense()
    rows = ["".join("1" if b else "0" for b in row) for row in bits]
    return f"{mask.L}\n" + "".join(r + "\n" for r in rows)


def parse_mask(text: str) -> AttentionMask:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MaskFormatError("empty mask text")
    header = lines[0].strip()
    if not header.isdigit() or int(header) < 1:
        raise MaskFormatError(f"malformed header {lines[0]!r}")
    L = int(header)
    body = lines[1:]
    if len(body) != L:
        raise MaskFormatError(f"expected {L} rows, got {len(body)}")
    for i, row in enumerate(body):
        if len(row) != L:
            raise MaskFormatError(f"row {i} has length {len(row)}, expected {L}")
        if set(row) - {"0", "1"}:
            raise MaskFormatError(f"row {i} contains characters other than 0/1")
    bits = np.frombuffer("".join(body).encode("ascii"), dtype=np.uint8).reshape(L, L) == ord("1")
    return AttentionMask.from_dense(bits)


@dataclass(frozen=True)
class Group:
    query: tuple[int, int]
    kv: tuple[tuple[int, int], ...]

    @property
    def query_len(self) -> int:
        return self.query[1] - self.query[0]

    @property
    def kv_len(self) -> int:
        return sum(b - a for a, b in self.kv)


@dataclass(frozen=True)
class GroupedPlan:
    L: int
    groups: tuple[Group, ...]

    def validate(self) -> None:
        """Check that query spans partition ``[0, L)`` and spans are in range."""
        pos = 0
        for g in sorted(self.groups, key=lambda g: g.query[0]):
            a, b = g.query
            if a != pos or b <= a:
                raise ValueError(f"query spans overlap or leave a gap at token {pos}: {g.query}")
            pos = b
            for ka, kb in g.kv:
                if not 0 <= ka < kb <= self.L:
                    raise ValueError(f"kv span {(ka, kb)} out of range for L={self.L}")
        if pos != self.L:
            raise ValueError(f"query spans cover [0, {pos}) but L={self.L}")

    def to_mask(self) -> AttentionMask:
        """Union of ``query x kv`` rectangles (test and verification helper)."""
        bits = np.zeros((self.L, self.L), dtype=bool)
        for g in self.groups:
            for ka, kb in g.kv:
                bits[g.query[0]:g.query[1], ka:kb] = True
        return AttentionMask.from_dense(bits)


def _merge_spans(spans: list[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    merged: list[tuple[int, int]] = []
    for a, b in sorted(spans):
        if merged and merged[-1][1] == a:
            merged[-1] = (merged[-1][0], b)
        else:
            merged.append((a, b))
    return tuple(merged)


def build_grouped_plan(layout: SegmentLayout, variant: MaskVariant | str) -> GroupedPlan:
    blocks = block_matrix(layout.n, variant)
    spans = layout.spans()
    groups = []
    for g, query in enumerate(spans):
        kv = _merge_spans([spans[k] for k in range(layout.num_groups) if blocks[g, k]])
        if not kv:
            raise AssertionError(f"group {g} has no permitted keys")
        groups.append(Group(query, kv))
    return GroupedPlan(layout.total_len, tuple(groups))


@dataclass(frozen=True)
class ConditionalMask:
    m: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def is_conditional(self) -> bool:
        return any(v == 0 for v in self.m)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.m, dtype=np.float32)


def build_conditional_mask(n: int, conditional: bool) -> ConditionalMask:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if conditional:
        return ConditionalMask(tuple([0] * (n - 1) + [1]))
    return ConditionalMask(tuple([1] * n))
