"""The cloud good twin: a metadata-only replica that replays FileOps.

The replica never holds file data. It executes each delegated operation
against its own metadata copy, answers with the resulting block-request
trace plus an ok-to-commit, and makes the staged metadata delta durable only
when the device sends the final commit (two-phase commit). Staged deltas are
journaled so a commit resent after a crash can still be applied; replay of
op N+1 proceeds against N's staged state, and aborting N cascades to every
later staged transaction.
"""

from __future__ import annotations

import io
import os
import struct
import socketserver
import threading

from twinfs import stencil, wire
from twinfs.blockstore import BLOCK_SIZE, ZERO_BLOCK
from twinfs.minifs import (
    Engine,
    FdState,
    INODE_SIZE,
    Inode,
    MODE_FILE,
    MetadataAccessor,
    OpOutcome,
    Status,
    Superblock,
)

ERR_UNKNOWN_TXN = 1
ERR_BAD_MESSAGE = 2

_J_STAGED = 1
_J_COMMIT = 2
_J_ABORT = 3
_J_HEAD = struct.Struct("<BQI")  # kind, seq, delta count


class BadImageError(Exception):
    pass


class _StateAccessor(MetadataAccessor):
    """Engine view over committed + staged metadata, recording deltas."""

    def __init__(self, session: "ReplicaSession"):
        self.session = session
        self.recording: dict[int, tuple[bytes, bytes]] | None = None

    def read_meta(self, block_id: int) -> bytes:
        return self.session._read_view(block_id)

    def write_meta(self, block_id: int, data: bytes) -> None:
        old = self.session._read_view(block_id)
        data = bytes(data)
        if self.recording is not None:
            prior = self.recording.get(block_id)
            self.recording[block_id] = (prior[0] if prior else old, data)
        self.session.view[block_id] = data


class ReplicaSession:
    """One device's metadata replica plus its 2PC staging journal."""

    def __init__(self, state_dir: str | None = None):
        self.state_dir = state_dir
        self.base = b""
        self.sb: Superblock | None = None
        self.committed: dict[int, bytes] = {}
        self.view: dict[int, bytes] = {}
        self.staged: list[tuple[int, dict[int, tuple[bytes, bytes]]]] = []
        self.fd_snapshots: dict[int, dict[int, FdState]] = {}
        self.expected_seq = 1
        self.last_committed = 0
        self.cloud_stencils = False
        self._last_stencil: stencil.StencilMap | None = None
        self.accessor = _StateAccessor(self)
        self.engine: Engine | None = None
        self._journal: io.BufferedWriter | None = None

    # -- bootstrap and durable state -------------------------------------

    @classmethod
    def bootstrap(cls, metadata_image: bytes, state_dir: str | None = None) -> "ReplicaSession":
        session = cls(state_dir)
        session.sb = Superblock.unpack(metadata_image[:BLOCK_SIZE])
        session.base = bytes(metadata_image)
        session._assert_zero_data(metadata_image)
        if state_dir:
            os.makedirs(state_dir, exist_ok=True)
            with open(os.path.join(state_dir, "base.img"), "wb") as f:
                f.write(metadata_image)
            session._open_journal()
        session.engine = Engine(session.accessor)
        return session

    @classmethod
    def load(cls, state_dir: str) -> "ReplicaSession":
        session = cls(state_dir)
        with open(os.path.join(state_dir, "base.img"), "rb") as f:
            session.base = f.read()
        session.sb = Superblock.unpack(session.base[:BLOCK_SIZE])
        path = os.path.join(state_dir, "journal.bin")
        if os.path.exists(path):
            with open(path, "rb") as f:
                session._replay_journal(f.read())
        session._open_journal()
        session.engine = Engine(session.accessor)
        return session

    def _assert_zero_data(self, image: bytes) -> None:
        sb = self.sb
        data_bytes = image[sb.data_start * BLOCK_SIZE :]
        if any(data_bytes):
            raise BadImageError("metadata image carries nonzero data-region bytes")
        # File inodes with inline content must arrive with the window erased;
        # directory inline windows hold entries, which are metadata.
        for index in range(sb.inode_count):
            tbid, off = sb.inode_location(index)
            raw = image[tbid * BLOCK_SIZE + off : tbid * BLOCK_SIZE + off + INODE_SIZE]
            if len(raw) < INODE_SIZE:
                break
            inode = Inode.unpack(raw)
            if inode.mode == MODE_FILE and any(inode.inline):
                raise BadImageError("metadata image carries inline file bytes")

    def _open_journal(self) -> None:
        path = os.path.join(self.state_dir, "journal.bin")
        self._journal = open(path, "ab")

    def _journal_append(self, record: bytes) -> None:
        if self._journal is None:
            return
        self._journal.write(record)
        self._journal.flush()
        os.fsync(self._journal.fileno())

    def _replay_journal(self, raw: bytes) -> None:
        offset = 0
        while offset < len(raw):
            kind, seq, count = _J_HEAD.unpack_from(raw, offset)
            offset += _J_HEAD.size
            if kind == _J_STAGED:
                delta: dict[int, tuple[bytes, bytes]] = {}
                for _ in range(count):
                    (bid,) = struct.unpack_from("<I", raw, offset)
                    offset += 4
                    new = bytes(raw[offset : offset + BLOCK_SIZE])
                    offset += BLOCK_SIZE
                    delta[bid] = (self._read_view(bid), new)
                    self.view[bid] = new
                self.staged.append((seq, delta))
                self.expected_seq = seq + 1
            elif kind == _J_COMMIT:
                self._apply_commit(seq)
            elif kind == _J_ABORT:
                self._apply_abort(seq)
            else:
                raise BadImageError("corrupt journal record kind %d" % kind)

    def compact(self) -> None:
        """Fold committed deltas into the base image; keep staged records."""
        if not self.state_dir:
            return
        total = len(self.base) // BLOCK_SIZE
        image = bytearray(self.base)
        extra = {bid: data for bid, data in self.committed.items() if bid >= total}
        for bid, data in self.committed.items():
            if bid < total:
                image[bid * BLOCK_SIZE : (bid + 1) * BLOCK_SIZE] = data
        if extra:
            top = max(extra) + 1
            image.extend(bytes((top - total) * BLOCK_SIZE))
            for bid, data in extra.items():
                image[bid * BLOCK_SIZE : (bid + 1) * BLOCK_SIZE] = data
        self.base = bytes(image)
        self.committed = {}
        with open(os.path.join(self.state_dir, "base.img"), "wb") as f:
            f.write(self.base)
        if self._journal:
            self._journal.close()
        with open(os.path.join(self.state_dir, "journal.bin"), "wb") as f:
            for seq, delta in self.staged:
                f.write(self._staged_record(seq, delta))
        self._open_journal()

    def close(self) -> None:
        if self._journal:
            self._journal.close()
            self._journal = None

    # -- metadata views ----------------------------------------------------

    def _read_view(self, block_id: int) -> bytes:
        if block_id in self.view:
            return self.view[block_id]
        return self._read_durable(block_id)

    def _read_durable(self, block_id: int) -> bytes:
        if block_id in self.committed:
            return self.committed[block_id]
        start = block_id * BLOCK_SIZE
        if start < len(self.base):
            return bytes(self.base[start : start + BLOCK_SIZE])
        return ZERO_BLOCK

    def durable_digest(self) -> str:
        return stencil.metadata_digest(self._read_durable, self.sb.total_blocks)

    def state_bytes(self):
        """Every durable and staged byte held by the replica (taint scans)."""
        yield self.base
        for data in self.committed.values():
            yield data
        for _, delta in self.staged:
            for old, new in delta.values():
                yield old
                yield new
        for data in self.view.values():
            yield data

    # -- 2PC operations ------------------------------------------------------

    def replay_fileop(self, op) -> tuple[OpOutcome, bool]:
        """Execute one delegated op against staged state; stage its delta."""
        if op.seq != self.expected_seq:
            return OpOutcome(status=Status.SEQ_GAP), False
        self.fd_snapshots[op.seq] = {
            fd: FdState(st.inode, st.pos, st.flags) for fd, st in self.engine.fds.items()
        }
        self.accessor.recording = {}
        outcome = self.engine.exec_fileop(op)
        delta = self.accessor.recording
        self.accessor.recording = None
        self.staged.append((op.seq, delta))
        self._journal_append(self._staged_record(op.seq, delta))
        self.expected_seq = op.seq + 1
        return outcome, True

    @staticmethod
    def _staged_record(seq: int, delta) -> bytes:
        parts = [_J_HEAD.pack(_J_STAGED, seq, len(delta))]
        for bid in sorted(delta):
            parts.append(struct.pack("<I", bid))
            parts.append(delta[bid][1])
        return b"".join(parts)

    def commit(self, seq: int) -> bool:
        """Make a staged delta durable. Idempotent for already-committed seqs."""
        if seq <= self.last_committed:
            return True
        if not self.staged or self.staged[0][0] != seq:
            return False
        self._journal_append(_J_HEAD.pack(_J_COMMIT, seq, 0))
        self._apply_commit(seq)
        return True

    def _apply_commit(self, seq: int) -> None:
        if seq <= self.last_committed or not self.staged or self.staged[0][0] != seq:
            return
        _, delta = self.staged.pop(0)
        for bid, (_, new) in delta.items():
            self.committed[bid] = new
        self.last_committed = seq
        self.fd_snapshots.pop(seq, None)

    def abort(self, seq: int) -> bool:
        """Drop staged deltas >= seq, rewinding state; cascades forward."""
        if seq <= self.last_committed:
            return False
        if not any(s >= seq for s, _ in self.staged):
            # Recovery abort of an op that never arrived: nothing to drop.
            return True
        self._journal_append(_J_HEAD.pack(_J_ABORT, seq, 0))
        self._apply_abort(seq)
        return True

    def _apply_abort(self, seq: int) -> None:
        restored_fds: dict[int, FdState] | None = None
        while self.staged and self.staged[-1][0] >= seq:
            s, delta = self.staged.pop()
            for bid, (old, _) in delta.items():
                self.view[bid] = old
            snap = self.fd_snapshots.pop(s, None)
            if snap is not None:
                restored_fds = snap
        if restored_fds is not None and self.engine is not None:
            self.engine.fds = restored_fds
        self.expected_seq = seq

    # -- message handling -----------------------------------------------------

    def handle_message(self, raw: bytes) -> bytes:
        kind, seq, body = wire.decode_net(raw)
        if kind == wire.NetKind.HELLO:
            _, cloud_stencils, _ = wire.decode_hello(body)
            self.cloud_stencils = cloud_stencils
            ack = bytes.fromhex(self.durable_digest())
            if cloud_stencils:
                self._last_stencil = stencil.build_stencils(self._read_view)
                ack += wire.encode_stencil_delta(
                    [
                        (bid, cls, self._last_stencil.mixed_ranges.get(bid, ()))
                        for bid, cls in sorted(self._last_stencil.classes.items())
                    ]
                )
            return wire.encode_net(wire.NetKind.ACK, seq, ack)
        if kind == wire.NetKind.FILEOP:
            op = wire.decode_fileop(body, seq=seq)
            outcome, ok = self.replay_fileop(op)
            resp = wire.encode_outcome(op.op, outcome, ok_to_commit=ok)
            if ok and self.cloud_stencils:
                new_map = stencil.build_stencils(self._read_view)
                resp += wire.encode_stencil_delta(new_map.delta_entries(self._last_stencil))
                self._last_stencil = new_map
            return wire.encode_net(wire.NetKind.TRACE_RESP, seq, resp)
        if kind == wire.NetKind.COMMIT:
            if self.commit(seq):
                return wire.encode_net(wire.NetKind.ACK, seq)
            return wire.encode_net(
                wire.NetKind.ERROR, seq, wire.encode_error(ERR_UNKNOWN_TXN, "unknown txn")
            )
        if kind == wire.NetKind.ABORT:
            if self.abort(seq):
                return wire.encode_net(wire.NetKind.ACK, seq)
            return wire.encode_net(
                wire.NetKind.ERROR, seq, wire.encode_error(ERR_UNKNOWN_TXN, "unknown txn")
            )
        return wire.encode_net(
            wire.NetKind.ERROR, seq, wire.encode_error(ERR_BAD_MESSAGE, "unexpected kind")
        )


def bootstrap(metadata_image: bytes, state_dir: str | None = None) -> ReplicaSession:
    return ReplicaSession.bootstrap(metadata_image, state_dir)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: ReplicaServer = self.server  # type: ignore[assignment]
        session: ReplicaSession | None = None
        try:
            while True:
                raw = wire.read_net_message(self.request.recv)
                if session is None:
                    kind, _, body = wire.decode_net(raw)
                    if kind != wire.NetKind.HELLO:
                        break
                    _, _, device_id = wire.decode_hello(body)
                    session = server.session_for(device_id)
                with server.lock_for(session):
                    self.request.sendall(session.handle_message(raw))
        except (wire.ChannelClosed, ConnectionError, OSError):
            pass


class ReplicaServer(socketserver.ThreadingTCPServer):
    """Network service hosting one metadata-only session per device."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen_addr: tuple[str, int], state_root: str | None = None):
        super().__init__(listen_addr, _Handler)
        self.state_root = state_root
        self._sessions: dict[bytes, ReplicaSession] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def session_for(self, device_id: bytes) -> ReplicaSession:
        with self._registry_lock:
            session = self._sessions.get(device_id)
            if session is None:
                state_dir = None
                if self.state_root:
                    state_dir = os.path.join(self.state_root, device_id.hex())
                if state_dir and os.path.exists(os.path.join(state_dir, "base.img")):
                    session = ReplicaSession.load(state_dir)
                else:
                    session = ReplicaSession.bootstrap(self._initial_image(), state_dir)
                self._sessions[device_id] = session
                self._locks[id(session)] = threading.Lock()
            return session

    def lock_for(self, session: ReplicaSession) -> threading.Lock:
        return self._locks[id(session)]

    def register_image(self, metadata_image: bytes) -> None:
        self._default_image = metadata_image

    def _initial_image(self) -> bytes:
        image = getattr(self, "_default_image", None)
        if image is None:
            raise BadImageError("no metadata image registered and none on disk")
        return image

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
