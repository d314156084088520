"""Fixed-geometry block array owned by the device core.

Backing is an in-memory sparse map; unwritten blocks read as zeros. The
optional image file is the raw little-endian concatenation of blocks with no
header. Checkpoints capture pre-images eagerly so speculative execution of
unvalidated operations can be rolled back exactly.
"""

from __future__ import annotations

import hashlib
import os

BLOCK_SIZE = 4096
ZERO_BLOCK = bytes(BLOCK_SIZE)


class OutOfRangeError(Exception):
    """Block id is outside the store geometry."""


class StaleCheckpointError(Exception):
    """Checkpoint was already consumed by a rollback."""


class Checkpoint:
    """Pre-images of the blocks an unvalidated operation is about to modify.

    add() keeps the first capture per block, so a checkpoint can grow lazily
    while an operation discovers its write set.
    """

    def __init__(self, store: "BlockStore", ids):
        self._store = store
        self.saved: dict[int, bytes] = {}
        self.consumed = False
        for bid in ids:
            self.add(bid)

    def add(self, block_id: int) -> None:
        if self.consumed:
            raise StaleCheckpointError("checkpoint already consumed")
        if block_id not in self.saved:
            self.saved[block_id] = self._store.read_block(block_id)

    @property
    def block_ids(self):
        return set(self.saved)


class BlockStore:
    """In-memory block device with checkpoint/rollback support.

    Single-writer: all mutation happens on the verification/execution
    sequence. Geometry never changes after construction.
    """

    def __init__(self, total_blocks: int, blocks: dict[int, bytes] | None = None):
        if total_blocks <= 0:
            raise ValueError("total_blocks must be positive")
        self.total_blocks = total_blocks
        self._blocks: dict[int, bytes] = {}
        if blocks:
            for bid, data in blocks.items():
                self._check(bid)
                if len(data) != BLOCK_SIZE:
                    raise ValueError("block %d is not %d bytes" % (bid, BLOCK_SIZE))
                self._blocks[bid] = bytes(data)

    def _check(self, block_id: int) -> None:
        if not 0 <= block_id < self.total_blocks:
            raise OutOfRangeError(
                "block %d out of range (geometry %d)" % (block_id, self.total_blocks)
            )

    def read_block(self, block_id: int) -> bytes:
        self._check(block_id)
        return self._blocks.get(block_id, ZERO_BLOCK)

    def write_block(self, block_id: int, data: bytes) -> None:
        self._check(block_id)
        if len(data) != BLOCK_SIZE:
            raise ValueError("block write must be exactly %d bytes" % BLOCK_SIZE)
        self._blocks[block_id] = bytes(data)

    def checkpoint(self, ids) -> Checkpoint:
        for bid in ids:
            self._check(bid)
        return Checkpoint(self, ids)

    def rollback(self, cp: Checkpoint) -> None:
        if cp.consumed:
            raise StaleCheckpointError("checkpoint already consumed")
        for bid, data in cp.saved.items():
            if data == ZERO_BLOCK:
                self._blocks.pop(bid, None)
            else:
                self._blocks[bid] = data
        cp.consumed = True

    def discard(self, cp: Checkpoint) -> None:
        """Drop a checkpoint after its operation validated."""
        cp.consumed = True
        cp.saved.clear()

    def digest(self) -> str:
        h = hashlib.sha256()
        for bid in range(self.total_blocks):
            h.update(self._blocks.get(bid, ZERO_BLOCK))
        return h.hexdigest()

    def snapshot(self) -> dict[int, bytes]:
        return dict(self._blocks)

    def restore(self, snap: dict[int, bytes]) -> None:
        self._blocks = dict(snap)

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.truncate(self.total_blocks * BLOCK_SIZE)
            for bid in sorted(self._blocks):
                f.seek(bid * BLOCK_SIZE)
                f.write(self._blocks[bid])
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "BlockStore":
        size = os.path.getsize(path)
        if size % BLOCK_SIZE:
            raise ValueError("image size is not a multiple of %d" % BLOCK_SIZE)
        total = size // BLOCK_SIZE
        blocks: dict[int, bytes] = {}
        with open(path, "rb") as f:
            for bid in range(total):
                data = f.read(BLOCK_SIZE)
                if data != ZERO_BLOCK:
                    blocks[bid] = data
        return cls(total, blocks)
