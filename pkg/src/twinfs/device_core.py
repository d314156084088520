"""The trusted device core.

Serves POSIX-like file APIs to one client out of a secure fd table, page
cache and block store. Cache misses are delegated to two filesystem twins:
the untrusted local engine behind the stencil-gated channel, and the
metadata-only cloud replica. Only operations both twins agree on survive;
everything executed speculatively from local advice is checkpointed and
rolled back on dissension. Writes are asynchronous (the client never waits
for the network), reads are synchronous unless the fd was opened with the
UNTRUSTED flag, and fstat is always synchronous.
"""

from __future__ import annotations

import hmac
import hashlib
import json
import os
import uuid
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace

from twinfs import stencil, wire
from twinfs.blockstore import BLOCK_SIZE, BlockStore, Checkpoint, OutOfRangeError, ZERO_BLOCK
from twinfs.local_twin import LocalTwin, SyncChannel
from twinfs.minifs import (
    FileOp,
    INODE_SIZE,
    Inode,
    MAX_FILE_SIZE,
    OpCode,
    OpFlag,
    OpOutcome,
    SEEK_CUR,
    SEEK_END,
    SEEK_SET,
    SegKind,
    Status,
    Superblock,
    TOKEN_LEN,
)
from twinfs.transport import OfflineError


class DeviceError(Exception):
    pass


class NoSuchFileError(DeviceError):
    pass


class NoSpaceError(DeviceError):
    pass


class BadFdError(DeviceError):
    pass


class VerificationFailedError(DeviceError):
    """Twins disagreed; the operation was rolled back."""


class CrashSignal(BaseException):
    """Raised by a crash hook to cut execution at a protocol step."""

    def __init__(self, point: str, seq: int):
        super().__init__(point)
        self.point = point
        self.seq = seq


_STATUS_ERRORS = {
    Status.NO_SUCH_FILE: NoSuchFileError,
    Status.NO_SPACE: NoSpaceError,
    Status.BAD_FD: BadFdError,
    Status.INVALID: DeviceError,
}


def _raise_status(status: Status):
    raise _STATUS_ERRORS.get(status, DeviceError)(status.name)


TRUSTED = "trusted"
UNTRUSTED = "untrusted"

MATCH = "match"
MISMATCH = "mismatch"
LOCAL_REJECT = "local_reject"
CLOUD_REJECT = "cloud_reject"


@dataclass(frozen=True)
class Verdict:
    kind: str
    divergence: int | None = None

    @property
    def is_match(self) -> bool:
        return self.kind == MATCH


def verify_traces(local, cloud) -> Verdict:
    """Element-wise comparison of two block-request traces."""
    for index, (a, b) in enumerate(zip(local, cloud)):
        if a.kind != b.kind or a.block != b.block:
            return Verdict(MISMATCH, index)
    if len(local) != len(cloud):
        return Verdict(MISMATCH, min(len(local), len(cloud)))
    return Verdict(MATCH)


@dataclass
class CacheEntry:
    page: bytearray
    block: int | None = None
    inline: bool = False
    trust: str = TRUSTED
    dirty: bool = False
    valid: list[tuple[int, int]] | None = None  # None = whole page valid


class PageCache:
    """Secure page cache: (file inode, page index) -> page bytes.

    Untrusted and dirty entries are pinned: they are never evicted and never
    flushed. Clean trusted entries evict LRU, reporting their block mapping
    so it can be memoized.
    """

    def __init__(self, capacity: int, on_evict=None):
        self.capacity = capacity
        self.entries: OrderedDict[tuple[int, int], CacheEntry] = OrderedDict()
        self.on_evict = on_evict

    def get(self, key) -> CacheEntry | None:
        entry = self.entries.get(key)
        if entry is not None:
            self.entries.move_to_end(key)
        return entry

    def put(self, key, entry: CacheEntry) -> None:
        self.entries[key] = entry
        self.entries.move_to_end(key)
        self._evict()

    def _evict(self) -> None:
        if len(self.entries) <= self.capacity:
            return
        for key in list(self.entries):
            entry = self.entries[key]
            if entry.dirty or entry.trust != TRUSTED:
                continue
            del self.entries[key]
            if self.on_evict:
                self.on_evict(key, entry)
            if len(self.entries) <= self.capacity:
                return

    def over_capacity(self) -> bool:
        return len(self.entries) > self.capacity

    def drop_file(self, inode: int) -> None:
        for key in [k for k in self.entries if k[0] == inode]:
            del self.entries[key]

    def clear_all(self) -> None:
        """Test hook: evict every evictable entry (memoizing mappings)."""
        for key in list(self.entries):
            entry = self.entries[key]
            if entry.dirty or entry.trust != TRUSTED:
                continue
            del self.entries[key]
            if self.on_evict:
                self.on_evict(key, entry)


class MemoTable:
    """Validated (file, page) -> block mappings; repeat reads skip the twins."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.entries: dict[tuple[int, int], int] = {}

    def put(self, key, block: int) -> None:
        if self.enabled:
            self.entries[key] = block

    def get(self, key) -> int | None:
        if not self.enabled:
            return None
        return self.entries.get(key)

    def invalidate_file(self, inode: int) -> None:
        for key in [k for k in self.entries if k[0] == inode]:
            del self.entries[key]


@dataclass
class FdEntry:
    inode: int
    pos: int
    twin_pos: int
    flags: int
    tokens: tuple[bytes, ...]
    twin_unknown: bool = False
    closed: bool = False
    failed: bool = False
    last_error: Status | None = None
    pending: int = 0


@dataclass
class PendingOp:
    seq: int
    op: FileOp
    fd: int | None
    file_inode: int | None
    pos_before: int
    checkpoint: Checkpoint
    dirtied: set[int] = field(default_factory=set)
    local: OpOutcome | None = None
    cloud: OpOutcome | None = None
    local_violation: str | None = None
    reject_seen: bool = False
    pages: list[tuple[int, int]] = field(default_factory=list)
    smap_before = None
    verdict: Verdict | None = None
    error: Status | None = None
    resolved: bool = False
    client_kind: str = "op"  # 'op' or 'resync'


@dataclass
class Metrics:
    fileops_sent: int = 0
    commits_sent: int = 0
    aborts_sent: int = 0
    hellos_sent: int = 0
    matches: int = 0
    mismatches: int = 0
    rejects_served: int = 0

    @property
    def rpc_total(self) -> int:
        return self.fileops_sent + self.commits_sent + self.aborts_sent + self.hellos_sent


@dataclass
class DeviceConfig:
    cache_pages: int = 64
    memo_enabled: bool = True
    emergency_bytes: int = 65536
    stencil_source: str = "device"  # or "cloud"
    durable_data: bool = False  # persist the store at every validated op
    gate_enabled: bool = True  # False only for benchmarking the gate's cost
    crash_hook = None

    def __post_init__(self):
        if self.stencil_source not in ("device", "cloud"):
            raise ValueError("stencil_source must be 'device' or 'cloud'")


class MemoryDurability:
    """Durable-state sink kept in process memory (crash exploration)."""

    def __init__(self):
        self.store_snapshot: dict[int, bytes] | None = None
        self.total_blocks = 0
        self.meta: dict | None = None

    def save_store(self, snapshot, total_blocks: int) -> None:
        self.store_snapshot = snapshot
        self.total_blocks = total_blocks

    def load_store(self):
        return self.store_snapshot

    def save_meta(self, meta: dict) -> None:
        self.meta = json.loads(json.dumps(meta))

    def load_meta(self):
        return self.meta


class FileDurability:
    """Durable-state sink backed by a state directory."""

    def __init__(self, state_dir: str):
        self.state_dir = state_dir
        os.makedirs(state_dir, exist_ok=True)

    def _store_path(self) -> str:
        return os.path.join(self.state_dir, "store.img")

    def save_store(self, snapshot, total_blocks: int) -> None:
        BlockStore(total_blocks, snapshot).save(self._store_path())

    def load_store(self):
        path = self._store_path()
        if not os.path.exists(path):
            return None
        return BlockStore.load(path).snapshot()

    def save_meta(self, meta: dict) -> None:
        tmp = os.path.join(self.state_dir, "meta.json.tmp")
        with open(tmp, "w") as f:
            json.dump(meta, f)
        os.replace(tmp, os.path.join(self.state_dir, "meta.json"))

    def load_meta(self):
        path = os.path.join(self.state_dir, "meta.json")
        if not os.path.exists(path):
            return None
        with open(path) as f:
            return json.load(f)


class MetadataGate:
    """Answers the twin's channel requests through the stencil.

    Reads reveal metadata and redact data; writes merge metadata bytes and
    preserve data bytes; requests for pure data blocks are rejected. Every
    block a gated write touches is checkpointed first so a later dissension
    rolls the whole operation back.
    """

    def __init__(self, device: "DeviceCore"):
        self.device = device
        self._write_frames: list[wire.Frame] = []
        self.current: PendingOp | None = None

    def __call__(self, frame: wire.Frame) -> list[wire.Frame]:
        device = self.device
        gated = device.config.gate_enabled
        if frame.kind == wire.FrameKind.META_READ_REQ:
            bid = int.from_bytes(wire.reassemble_message([frame])[:4], "little")
            if bid >= device.store.total_blocks:
                return wire.fragment_message(wire.FrameKind.META_READ_RESP, frame.seq, ZERO_BLOCK)
            if not gated:
                return wire.fragment_message(
                    wire.FrameKind.META_READ_RESP, frame.seq, device.store.read_block(bid)
                )
            try:
                data = stencil.serve_block_read(device.smap, bid, device.store.read_block(bid))
            except stencil.BlockRejected:
                return self._reject(frame.seq, bid)
            return wire.fragment_message(wire.FrameKind.META_READ_RESP, frame.seq, data)
        if frame.kind == wire.FrameKind.META_WRITE_REQ:
            self._write_frames.append(frame)
            if len(frame.payload) - wire.FRAG_HEADER.size == wire.FRAG_CHUNK_MAX:
                return []
            blob = wire.reassemble_message(self._write_frames)
            self._write_frames = []
            bid = int.from_bytes(blob[:4], "little")
            data = blob[4:]
            if bid >= device.store.total_blocks or len(data) != BLOCK_SIZE:
                return self._reject(frame.seq, bid)
            try:
                if gated:
                    merged = stencil.apply_block_write(
                        device.smap, bid, data, device.store.read_block(bid)
                    )
                else:
                    merged = bytes(data)
            except stencil.BlockRejected:
                return self._reject(frame.seq, bid)
            if self.current is not None:
                self.current.checkpoint.add(bid)
                self.current.dirtied.add(bid)
            if device.smap.classify(bid) == stencil.CLASS_UNUSED:
                # A freshly allocated metadata block (directory growth) must
                # read back what the twin wrote; the post-validation refresh
                # settles its real class, and a rollback restores the old map.
                device.smap.classes[bid] = stencil.CLASS_METADATA
            device.store.write_block(bid, merged)
            return [wire.Frame(wire.FrameKind.META_WRITE_RESP, frame.seq, wire.FRAG_HEADER.pack(0) + b"\x00")]
        return self._reject(frame.seq, 0)

    def _reject(self, seq: int, bid: int) -> list[wire.Frame]:
        self.device.metrics.rejects_served += 1
        if self.current is not None:
            self.current.reject_seen = True
        payload = wire.FRAG_HEADER.pack(0) + bid.to_bytes(4, "little") + b"\x01"
        return [wire.Frame(wire.FrameKind.REJECT, seq, payload)]


class DeviceCore:
    """One client session's trusted core."""

    def __init__(
        self,
        store: BlockStore,
        transport,
        twin: LocalTwin,
        config: DeviceConfig | None = None,
        durability=None,
        meta: dict | None = None,
    ):
        self.store = store
        self.transport = transport
        self.config = config or DeviceConfig()
        self.durability = durability
        self.metrics = Metrics()
        self.sb = Superblock.unpack(store.read_block(0))
        self.memo = MemoTable(self.config.memo_enabled)
        self.cache = PageCache(self.config.cache_pages, on_evict=self._memoize_evicted)
        self.fds: dict[int, FdEntry] = {}
        self.file_sizes: dict[int, int] = {}
        self.pending: deque[PendingOp] = deque()
        self._expected: deque[dict] = deque()
        self.offline_queue: list[tuple] = []
        self._flushing = False
        self.gate = MetadataGate(self)
        self.twin = twin
        self.channel = SyncChannel(self.gate, twin)
        self.smap = stencil.build_stencils(store.read_block)

        meta = meta or {}
        self.device_id = bytes.fromhex(meta["device_id"]) if meta.get("device_id") else uuid.uuid4().bytes
        self.prf_key = bytes.fromhex(meta["prf_key"]) if meta.get("prf_key") else os.urandom(16)
        self.next_seq = meta.get("next_seq", 1)
        self.intents: dict[int, str] = {int(k): v for k, v in meta.get("intents", {}).items()}
        self.emergency: dict | None = meta.get("emergency")
        self._hello_done = False
        self.last_replica_digest = ""
        self._capture_blocks: dict | None = None
        if self.emergency:
            self._memoize_emergency()
        if not self.offline:
            self._hello()
            if self.config.emergency_bytes and not self.emergency:
                self._create_emergency()

    def _memoize_emergency(self) -> None:
        # The emergency extent stays memoized even when memoization is off.
        cursor = 0
        for segment in self.emergency["segments"]:
            for page in range(segment["size"] // BLOCK_SIZE):
                self.memo.entries[(segment["inode"], page)] = self.emergency["blocks"][cursor]
                cursor += 1

    # -- construction helpers ------------------------------------------------

    @classmethod
    def load(cls, durability, transport, twin, config=None) -> "DeviceCore":
        meta = durability.load_meta()
        snapshot = durability.load_store()
        if meta is None or snapshot is None:
            raise DeviceError("no durable device state to load")
        store = BlockStore(meta["total_blocks"], snapshot)
        return cls(store, transport, twin, config, durability, meta)

    @property
    def offline(self) -> bool:
        return bool(getattr(self.transport, "severed", False))

    def size_of(self, inode: int) -> int:
        size = self.file_sizes.get(inode)
        if size is None:
            size = self._inode_size(inode)
            self.file_sizes[inode] = size
        return size

    def obfuscate(self, path: str) -> tuple[bytes, ...]:
        """Keyed PRF per path component; deterministic so twins can walk paths."""
        parts = [p for p in path.split("/") if p]
        return tuple(
            hmac.new(self.prf_key, p.encode("utf-8"), hashlib.sha256).digest()[:TOKEN_LEN]
            for p in parts
        )

    def device_metadata_digest(self) -> str:
        return stencil.metadata_digest(self.store.read_block, self.store.total_blocks)

    # -- durable state ---------------------------------------------------------

    def _meta_dict(self) -> dict:
        return {
            "device_id": self.device_id.hex(),
            "prf_key": self.prf_key.hex(),
            "next_seq": self.next_seq,
            "intents": {str(k): v for k, v in self.intents.items()},
            "emergency": self.emergency,
            "total_blocks": self.store.total_blocks,
        }

    def _persist_meta(self) -> None:
        if self.durability is not None:
            self.durability.save_meta(self._meta_dict())

    def _persist_store(self) -> None:
        if self.durability is not None:
            self.durability.save_store(self.store.snapshot(), self.store.total_blocks)

    def persist(self) -> None:
        self._persist_store()
        self._persist_meta()

    def _intent_set(self, seq: int, phase: str) -> None:
        self.intents[seq] = phase
        self._persist_meta()

    def _intent_clear(self, seq: int) -> None:
        if self.intents.pop(seq, None) is not None:
            self._persist_meta()

    def _crash_hook(self, point: str, seq: int) -> None:
        hook = self.config.crash_hook
        if hook is not None:
            hook(point, seq)

    # -- network plumbing -------------------------------------------------------

    def _send(self, kind: wire.NetKind, seq: int, body: bytes = b"") -> None:
        self.transport.send(wire.encode_net(kind, seq, body))

    def _hello(self) -> None:
        self._send(
            wire.NetKind.HELLO,
            0,
            wire.encode_hello(self.device_id, self.config.stencil_source == "cloud"),
        )
        self.metrics.hellos_sent += 1
        self._expected.append({"kind": "hello"})
        self._consume_until(lambda: self._hello_done)
        self._hello_done = False

    def _consume_until(self, done) -> None:
        while not done():
            if not self._expected:
                raise DeviceError("response expected but none outstanding")
            self._consume_next()

    def _consume_next(self) -> None:
        expect = self._expected.popleft()
        raw = self.transport.recv()
        kind, seq, body = wire.decode_net(raw)
        if expect["kind"] == "hello":
            self._handle_hello_ack(kind, body)
        elif expect["kind"] == "ack":
            self._handle_ack(expect, kind, seq)
        elif expect["kind"] == "discard-op":
            pass
        elif expect["kind"] == "op":
            self._handle_trace_resp(expect["pending"], kind, seq, body)
        else:
            raise DeviceError("unknown expectation %r" % expect)

    def _handle_hello_ack(self, kind: wire.NetKind, body: bytes) -> None:
        if kind != wire.NetKind.ACK:
            raise DeviceError("hello rejected by replica")
        self.last_replica_digest = body[:32].hex()
        if self.config.stencil_source == "cloud" and len(body) > 32:
            entries, _ = wire.decode_stencil_delta(body, 32)
            smap = stencil.StencilMap(total_blocks=self.store.total_blocks)
            smap.apply_delta(entries)
            self.smap = smap
        self._hello_done = True

    def fetch_replica_digest(self) -> str:
        """Ask the replica for its durable metadata digest (rides a HELLO)."""
        self.drain_all()
        self._hello()
        return self.last_replica_digest

    def _handle_ack(self, expect: dict, kind: wire.NetKind, seq: int) -> None:
        if expect.get("op") == "abort":
            # The abort cascaded at the replica; every intent it covered is done.
            covered = [s for s in self.intents if s >= expect["seq"]]
            for s in covered:
                self.intents.pop(s)
            if covered:
                self._persist_meta()
            return
        if kind == wire.NetKind.ACK:
            self._intent_clear(seq)
            return
        raise DeviceError("replica refused final commit for seq %d" % seq)

    # -- delegation pipeline -----------------------------------------------------

    def _alloc_fd(self) -> int:
        used = set(self.fds)
        for p in self.pending:
            if p.op.op == OpCode.OPEN:
                used.add(p.op.fd)
        fd = 0
        while fd in used:
            fd += 1
        return fd

    def _delegate(self, op: FileOp, fd: int | None, file_inode: int | None, pos_before: int,
                  client_kind: str = "op") -> PendingOp:
        if self.offline:
            raise OfflineError("cloud unreachable")
        if self.offline_queue and not self._flushing:
            self._flush_offline_queue()
        seq = self.next_seq
        self.next_seq += 1
        op = replace(op, seq=seq)
        pending = PendingOp(
            seq=seq,
            op=op,
            fd=fd,
            file_inode=file_inode,
            pos_before=pos_before,
            checkpoint=self.store.checkpoint(()),
            client_kind=client_kind,
        )
        pending.smap_before = self.smap.clone()
        self._crash_hook("before_delegate", seq)
        self._intent_set(seq, "delegated")
        self._send(wire.NetKind.FILEOP, seq, wire.encode_fileop(op))
        self.metrics.fileops_sent += 1
        self._expected.append({"kind": "op", "pending": pending})
        self.pending.append(pending)
        self._crash_hook("after_replay_staged", seq)
        self._run_local(pending)
        if pending.local is not None and pending.local.status == Status.OK:
            self._speculate(pending)
        if fd is not None and fd in self.fds:
            self.fds[fd].pending += 1
        return pending

    def _run_local(self, pending: PendingOp) -> None:
        self.gate.current = pending
        try:
            frames = wire.fragment_message(
                wire.FrameKind.FILEOP, pending.seq, wire.encode_fileop(pending.op)
            )
            responses = self.channel.delegate(frames)
            bad_seq = [f for f in responses if f.seq != pending.seq]
            if bad_seq or not responses:
                pending.local_violation = "stale or missing trace frames"
                return
            if any(f.kind != wire.FrameKind.TRACE for f in responses):
                pending.local_violation = "unexpected frame kind in trace response"
                return
            blob = wire.reassemble_message(responses)
            outcome, _ = wire.decode_outcome(pending.op.op, blob)
            pending.local = outcome
        except (wire.DecodeError, wire.ChannelClosed) as exc:
            pending.local_violation = str(exc)
        finally:
            self.gate.current = None

    # -- speculative execution ----------------------------------------------------

    def _page_key(self, inode: int, page: int) -> tuple[int, int]:
        return (inode, page)

    def _speculate(self, pending: PendingOp) -> None:
        """Execute the local twin's advised data movement, checkpointed."""
        local = pending.local
        op = pending.op
        if op.op != OpCode.WRITE or local.status != Status.OK:
            return
        inode = pending.file_inode
        cp = pending.checkpoint
        for req in local.trace:
            if 0 <= req.block < self.store.total_blocks:
                cp.add(req.block)
        if local.promote is not None:
            self._apply_promote(pending, local.promote)
        cursor = pending.pos_before
        for seg in local.segments:
            chunk = self._payload_from_cache(inode, cursor, seg.length)
            if seg.kind == SegKind.BLOCK:
                if not 0 <= seg.target < self.store.total_blocks:
                    cursor += seg.length
                    continue
                cp.add(seg.target)
                base = bytearray(ZERO_BLOCK) if seg.fresh else bytearray(self.store.read_block(seg.target))
                base[seg.offset : seg.offset + seg.length] = chunk
                self.store.write_block(seg.target, bytes(base))
                self._fill_cache_page(
                    inode, cursor // BLOCK_SIZE, bytes(base), block=seg.target, pending=pending
                )
            elif seg.kind == SegKind.INLINE:
                self._write_inline(pending, seg.target, seg.offset, chunk)
            cursor += seg.length

    def _apply_promote(self, pending: PendingOp, promote) -> None:
        tbid, start, end = self.sb.inline_window(promote.inode)
        pending.checkpoint.add(tbid)
        if 0 <= promote.dst_block < self.store.total_blocks:
            pending.checkpoint.add(promote.dst_block)
            window = self.store.read_block(tbid)[start : start + promote.length]
            block = bytearray(ZERO_BLOCK)
            block[: promote.length] = window
            self.store.write_block(promote.dst_block, bytes(block))

    def _write_inline(self, pending: PendingOp, inode: int, offset: int, chunk: bytes) -> None:
        tbid, start, end = self.sb.inline_window(inode)
        if start + offset + len(chunk) > end:
            return
        pending.checkpoint.add(tbid)
        raw = bytearray(self.store.read_block(tbid))
        raw[start + offset : start + offset + len(chunk)] = chunk
        self.store.write_block(tbid, bytes(raw))
        # The window now holds payload; gate it out before validation catches
        # up, or the next op's inode write would clobber (and leak) it.
        stencil.exclude_range(self.smap, tbid, start, end)
        page = bytearray(BLOCK_SIZE)
        page[: end - start] = self.store.read_block(tbid)[start:end]
        self._fill_cache_page(pending.file_inode, 0, bytes(page), inline=True, pending=pending)

    def _payload_from_cache(self, inode: int, offset: int, length: int) -> bytes:
        page = offset // BLOCK_SIZE
        start = offset % BLOCK_SIZE
        entry = self.cache.get(self._page_key(inode, page))
        if entry is None:
            return bytes(length)
        return bytes(entry.page[start : start + length])

    def _fill_cache_page(
        self,
        inode: int,
        page: int,
        content: bytes,
        block: int | None = None,
        inline: bool = False,
        pending: PendingOp | None = None,
        trust: str = TRUSTED,
    ) -> None:
        key = self._page_key(inode, page)
        entry = self.cache.get(key)
        if entry is None:
            entry = CacheEntry(page=bytearray(content))
            self.cache.put(key, entry)
        else:
            entry.page[:] = content
        entry.block = block
        entry.inline = inline
        entry.trust = trust
        entry.dirty = False
        entry.valid = None
        if pending is not None and key not in pending.pages:
            pending.pages.append(key)

    def _stage_payload(self, inode: int, pos: int, data: bytes) -> list[tuple[int, int]]:
        """Copy client payload into cache pages; returns the touched keys."""
        keys = []
        cursor = 0
        while cursor < len(data):
            offset = pos + cursor
            page = offset // BLOCK_SIZE
            start = offset % BLOCK_SIZE
            take = min(len(data) - cursor, BLOCK_SIZE - start)
            key = self._page_key(inode, page)
            entry = self.cache.get(key)
            if entry is None:
                entry = CacheEntry(page=bytearray(BLOCK_SIZE), valid=[])
                self.cache.put(key, entry)
            entry.page[start : start + take] = data[cursor : cursor + take]
            entry.dirty = True
            entry.trust = TRUSTED
            if entry.valid is not None:
                entry.valid.append((start, start + take))
            keys.append(key)
            cursor += take
        return keys

    # -- verdicts -------------------------------------------------------------------

    def _judge(self, pending: PendingOp, cloud: OpOutcome, ok: bool) -> Verdict:
        if pending.local_violation or pending.reject_seen or pending.local is None:
            return Verdict(LOCAL_REJECT)
        if pending.local.status == Status.REJECTED:
            return Verdict(LOCAL_REJECT)
        if cloud.status == Status.SEQ_GAP or not ok:
            return Verdict(CLOUD_REJECT)
        verdict = verify_traces(pending.local.trace, cloud.trace)
        if not verdict.is_match:
            return verdict
        if not pending.local.same_as(cloud):
            return Verdict(MISMATCH, -1)
        return verdict

    def _handle_trace_resp(self, pending: PendingOp, kind: wire.NetKind, seq: int, body: bytes) -> None:
        if kind == wire.NetKind.ERROR or seq != pending.seq:
            self.metrics.mismatches += 1
            self._fail_pending(pending, Verdict(CLOUD_REJECT), None)
            return
        try:
            cloud, ok, offset = wire.decode_outcome_at(pending.op.op, body)
        except wire.DecodeError:
            self.metrics.mismatches += 1
            self._fail_pending(pending, Verdict(CLOUD_REJECT), None)
            return
        pending.cloud = cloud
        delta = None
        if self.config.stencil_source == "cloud" and offset < len(body):
            delta, _ = wire.decode_stencil_delta(body, offset)
        verdict = self._judge(pending, cloud, ok)
        if verdict.is_match:
            self.metrics.matches += 1
            self._apply_match(pending, cloud, delta)
        else:
            self.metrics.mismatches += 1
            self._fail_pending(pending, verdict, cloud)

    def _apply_match(self, pending: PendingOp, cloud: OpOutcome, delta) -> None:
        pending.verdict = Verdict(MATCH)
        pending.resolved = True
        self.pending.remove(pending)
        self._fd_done(pending)
        if cloud.status != Status.OK:
            # Twins agree the op fails. Any metadata they wrote before failing
            # is identical on both sides, so the transaction still commits;
            # only the client payload never made it to storage.
            self.store.discard(pending.checkpoint)
            self._taint_pages(pending)
            pending.error = cloud.status
            self._record_fd_error(pending, cloud.status)
            if pending.file_inode is not None:
                # undo the optimistic size/position advance of a failed write
                size = self._inode_size(pending.file_inode)
                self.file_sizes[pending.file_inode] = size
                for entry in self.fds.values():
                    if entry.inode == pending.file_inode:
                        entry.pos = min(entry.pos, size)
                        entry.twin_pos = -1
            self._finish_commit(pending)
            return
        self.store.discard(pending.checkpoint)
        self._memo_update(pending, cloud)
        if pending.dirtied:
            self._refresh_stencils(delta)
        for key in pending.pages:
            entry = self.cache.entries.get(key)
            if entry is not None:
                entry.trust = TRUSTED
        if self.config.durable_data:
            self._persist_store()
        self._intent_set(pending.seq, "executed")
        self._crash_hook("after_device_exec", pending.seq)
        self._finish_commit(pending)

    def _finish_commit(self, pending: PendingOp) -> None:
        self._intent_set(pending.seq, "commit-sent")
        self._crash_hook("after_final_commit_sent", pending.seq)
        self._send(wire.NetKind.COMMIT, pending.seq)
        self.metrics.commits_sent += 1
        self._expected.append({"kind": "ack", "op": "commit", "seq": pending.seq})
        self._crash_hook("after_replica_commit", pending.seq)

    def _memo_update(self, pending: PendingOp, cloud: OpOutcome) -> None:
        op = pending.op
        if op.op == OpCode.OPEN and op.flags & OpFlag.TRUNC:
            self.memo.invalidate_file(cloud.inode)
            self.cache.drop_file(cloud.inode)
            return
        if op.op not in (OpCode.READ, OpCode.WRITE):
            return
        cursor = pending.pos_before
        for seg in cloud.segments:
            if seg.kind == SegKind.BLOCK:
                key = (pending.file_inode, cursor // BLOCK_SIZE)
                self.memo.put(key, seg.target)
                if self._capture_blocks is not None:
                    self._capture_blocks[key] = seg.target
            cursor += seg.length

    def _refresh_stencils(self, delta) -> None:
        old = self.smap
        if self.config.stencil_source == "cloud":
            if delta is None:
                return
            new = old.clone()
            new.apply_delta(delta)
        else:
            new = stencil.refresh(old, set(), self.store.read_block)
        for bid, start, end in stencil.scrub_ranges(old, new):
            if bid >= self.store.total_blocks:
                continue
            raw = self.store.read_block(bid)
            if any(raw[start:end]):
                patched = bytearray(raw)
                patched[start:end] = bytes(end - start)
                self.store.write_block(bid, bytes(patched))
        self.smap = new

    def _taint_pages(self, pending: PendingOp) -> None:
        for key in pending.pages:
            entry = self.cache.entries.get(key)
            if entry is not None:
                entry.trust = UNTRUSTED
                entry.dirty = True

    def _record_fd_error(self, pending: PendingOp, status: Status) -> None:
        if pending.fd is not None and pending.fd in self.fds:
            self.fds[pending.fd].last_error = status

    def _fd_done(self, pending: PendingOp) -> None:
        if pending.fd is not None and pending.fd in self.fds:
            entry = self.fds[pending.fd]
            entry.pending = max(0, entry.pending - 1)

    def _fail_pending(self, pending: PendingOp, verdict: Verdict, cloud: OpOutcome | None) -> None:
        """Mismatch path: roll back this op and everything stacked on it."""
        later = [p for p in self.pending if p.seq > pending.seq]
        for p in sorted(later, key=lambda q: q.seq, reverse=True):
            self.store.rollback(p.checkpoint)
            self._taint_pages(p)
            p.verdict = Verdict(CLOUD_REJECT)
            p.resolved = True
            self.pending.remove(p)
            self._fd_done(p)
            self._mark_failed(p)
        self.store.rollback(pending.checkpoint)
        self.smap = pending.smap_before
        self._taint_pages(pending)
        pending.verdict = verdict
        pending.resolved = True
        self.pending.remove(pending)
        self._fd_done(pending)
        self._mark_failed(pending)
        # Later responses already in flight are consumed and discarded.
        for expect in self._expected:
            if expect["kind"] == "op" and expect["pending"].seq > pending.seq:
                expect["kind"] = "discard-op"
        if not self.offline:
            self._send(wire.NetKind.ABORT, pending.seq)
            self.metrics.aborts_sent += 1
            self._expected.append({"kind": "ack", "op": "abort", "seq": pending.seq})
        self.next_seq = pending.seq
        self._persist_meta()
        # The local twin may have installed state for aborted ops; force a
        # fresh engine and lazy reopen/reseek of every surviving fd.
        self.twin.reset_engine()
        for entry in self.fds.values():
            entry.twin_unknown = True
            entry.twin_pos = -1
            size = self._inode_size(entry.inode)
            self.file_sizes[entry.inode] = size
            entry.pos = min(entry.pos, size)

    def _inode_size(self, inode: int) -> int:
        tbid, off = self.sb.inode_location(inode)
        raw = self.store.read_block(tbid)
        return Inode.unpack(raw[off : off + INODE_SIZE]).size

    def _mark_failed(self, pending: PendingOp) -> None:
        if pending.fd is not None and pending.fd in self.fds:
            self.fds[pending.fd].failed = True

    # -- draining ---------------------------------------------------------------

    def _drain_through(self, pending: PendingOp) -> None:
        self._consume_until(lambda: pending.resolved)

    def drain_ops(self) -> None:
        """Resolve every outstanding delegated operation (not commit acks)."""
        while any(e["kind"] in ("op", "discard-op") for e in self._expected):
            self._consume_next()

    def drain_all(self) -> None:
        while self._expected:
            self._consume_next()

    # -- fd helpers -----------------------------------------------------------------

    def _fd(self, fd: int) -> FdEntry:
        try:
            entry = self.fds[fd]
        except KeyError:
            raise BadFdError("fd %d is not open" % fd)
        if entry.closed:
            raise BadFdError("fd %d was closed" % fd)
        return entry

    def _realign_twins(self, fd: int, entry: FdEntry) -> None:
        if entry.twin_unknown:
            op = FileOp(OpCode.OPEN, fd, entry.flags & ~(OpFlag.CREATE | OpFlag.TRUNC), 0, entry.tokens)
            self._delegate(op, fd, entry.inode, 0, client_kind="resync")
            entry.twin_unknown = False
            entry.twin_pos = 0
        if entry.twin_pos != entry.pos:
            op = FileOp(OpCode.LSEEK, fd, SEEK_SET, entry.pos)
            self._delegate(op, fd, entry.inode, entry.pos, client_kind="resync")
            entry.twin_pos = entry.pos

    # -- client API --------------------------------------------------------------------

    def open(self, path: str, flags: int = 0) -> int:
        tokens = self.obfuscate(path)
        if not tokens:
            raise NoSuchFileError("empty path")
        if self.offline:
            return self._open_offline(path, tokens, flags)
        fd = self._alloc_fd()
        op = FileOp(OpCode.OPEN, fd, flags, 0, tokens)
        pending = self._delegate(op, None, None, 0)
        self._drain_through(pending)
        if not pending.verdict.is_match:
            raise VerificationFailedError("open diverged: %s" % pending.verdict.kind)
        if pending.error is not None:
            _raise_status(pending.error)
        cloud = pending.cloud
        self.fds[fd] = FdEntry(
            inode=cloud.inode, pos=0, twin_pos=0, flags=flags, tokens=tokens
        )
        self.file_sizes[cloud.inode] = cloud.size
        return fd

    def _open_offline(self, path: str, tokens, flags: int) -> int:
        if flags & (OpFlag.CREATE | OpFlag.TRUNC):
            raise OfflineError("cannot create or truncate while disconnected")
        inode, size = self._memoized_file(tokens)
        if inode is None:
            raise OfflineError("file not fully memoized; open requires the cloud")
        fd = self._alloc_fd()
        self.fds[fd] = FdEntry(
            inode=inode, pos=0, twin_pos=0, flags=flags,
            tokens=tokens, twin_unknown=True,
        )
        self.file_sizes[inode] = size
        return fd

    def _memoized_file(self, tokens) -> tuple[int | None, int]:
        if self.emergency:
            for segment in self.emergency["segments"]:
                if tokens == tuple(bytes.fromhex(t) for t in segment["tokens"]):
                    return segment["inode"], segment["size"]
        return None, 0

    def read(self, fd: int, length: int) -> tuple[bytes, str]:
        entry = self._fd(fd)
        n = min(length, max(self.size_of(entry.inode) - entry.pos, 0))
        if n <= 0:
            return b"", TRUSTED
        served = self._read_cached(entry, n)
        if served is not None:
            data, trust = served
            entry.pos += len(data)
            return data, trust
        if self.offline:
            raise OfflineError("read needs the twins and the device is disconnected")
        self._realign_twins(fd, entry)
        op = FileOp(OpCode.READ, fd, 0, length)
        pending = self._delegate(op, fd, entry.inode, entry.pos)
        if entry.flags & OpFlag.UNTRUSTED:
            if pending.local is None or pending.local.status != Status.OK:
                self._drain_through(pending)
                raise VerificationFailedError("local twin failed the read")
            data = self._materialize(pending, pending.local, trust=UNTRUSTED)
            entry.pos = entry.pos + len(data)
            entry.twin_pos = pending.local.position
            return data, UNTRUSTED
        self._drain_through(pending)
        if not pending.verdict.is_match:
            raise VerificationFailedError("read diverged: %s" % pending.verdict.kind)
        if pending.error is not None:
            _raise_status(pending.error)
        cloud = pending.cloud
        data = self._materialize(pending, cloud, trust=TRUSTED)
        entry.pos = cloud.position
        entry.twin_pos = cloud.position
        self.file_sizes[entry.inode] = cloud.size
        return data, TRUSTED

    def _read_cached(self, entry: FdEntry, n: int) -> tuple[bytes, str] | None:
        """Serve from page cache, falling back to memoized blocks; else None."""
        parts = []
        trust = TRUSTED
        cursor = entry.pos
        end = entry.pos + n
        while cursor < end:
            page = cursor // BLOCK_SIZE
            start = cursor % BLOCK_SIZE
            take = min(end - cursor, BLOCK_SIZE - start)
            key = self._page_key(entry.inode, page)
            cached = self.cache.get(key)
            if cached is not None:
                if cached.valid is not None and not _covers(cached.valid, start, start + take):
                    return None
                parts.append(bytes(cached.page[start : start + take]))
                if cached.trust == UNTRUSTED:
                    trust = UNTRUSTED
                cursor += take
                continue
            block = self.memo.get(key)
            if block is None:
                return None
            content = self.store.read_block(block)
            self._fill_cache_page(entry.inode, page, content, block=block)
            parts.append(content[start : start + take])
            cursor += take
        return b"".join(parts), trust

    def _materialize(self, pending: PendingOp, outcome: OpOutcome, trust: str) -> bytes:
        parts = []
        cursor = pending.pos_before
        for seg in outcome.segments:
            if seg.kind == SegKind.BLOCK:
                if not 0 <= seg.target < self.store.total_blocks:
                    raise VerificationFailedError("advised block out of range")
                content = self.store.read_block(seg.target)
                parts.append(content[seg.offset : seg.offset + seg.length])
                self._fill_cache_page(
                    pending.file_inode,
                    cursor // BLOCK_SIZE,
                    content,
                    block=seg.target,
                    pending=pending,
                    trust=trust,
                )
            elif seg.kind == SegKind.INLINE:
                tbid, start, wend = self.sb.inline_window(seg.target)
                window = self.store.read_block(tbid)[start:wend]
                parts.append(window[seg.offset : seg.offset + seg.length])
                page = bytearray(BLOCK_SIZE)
                page[: wend - start] = window
                self._fill_cache_page(
                    pending.file_inode, 0, bytes(page), inline=True, pending=pending, trust=trust
                )
            else:
                parts.append(bytes(seg.length))
            cursor += seg.length
        return b"".join(parts)

    def write(self, fd: int, data: bytes) -> int:
        entry = self._fd(fd)
        if not data:
            return 0
        if entry.pos + len(data) > MAX_FILE_SIZE:
            raise NoSpaceError("write would exceed the maximum file size")
        keys = self._stage_payload(entry.inode, entry.pos, data)
        if self.offline:
            if self.cache.over_capacity():
                raise NoSpaceError("offline write buffer exceeded cache capacity")
            self.offline_queue.append(("write", fd, entry.pos, len(data)))
            entry.pos += len(data)
            self.file_sizes[entry.inode] = max(self.size_of(entry.inode), entry.pos)
            return len(data)
        self._realign_twins(fd, entry)
        op = FileOp(OpCode.WRITE, fd, 0, len(data))
        pending = self._delegate(op, fd, entry.inode, entry.pos)
        for key in keys:
            if key not in pending.pages:
                pending.pages.append(key)
        entry.pos += len(data)
        self.file_sizes[entry.inode] = max(self.size_of(entry.inode), entry.pos)
        entry.twin_pos = entry.pos
        return len(data)

    def lseek(self, fd: int, offset: int, whence: int = SEEK_SET) -> int:
        entry = self._fd(fd)
        size = self.size_of(entry.inode)
        base = {SEEK_SET: 0, SEEK_CUR: entry.pos, SEEK_END: size}.get(whence)
        if base is None:
            raise DeviceError("bad whence %r" % whence)
        entry.pos = min(max(base + offset, 0), size)
        return entry.pos

    def fstat(self, fd: int) -> int:
        entry = self._fd(fd)
        if self.offline:
            raise OfflineError("fstat is synchronous and the device is disconnected")
        self._realign_twins(fd, entry)
        op = FileOp(OpCode.FSTAT, fd, 0, 0)
        pending = self._delegate(op, fd, entry.inode, entry.pos)
        self._drain_through(pending)
        if not pending.verdict.is_match:
            raise VerificationFailedError("fstat diverged: %s" % pending.verdict.kind)
        if pending.error is not None:
            _raise_status(pending.error)
        self.file_sizes[entry.inode] = pending.cloud.size
        return pending.cloud.size

    def fsync(self, fd: int) -> None:
        entry = self._fd(fd)
        if self.offline:
            if entry.pending or any(q[1] == fd for q in self.offline_queue):
                raise OfflineError("pending validations cannot resolve while disconnected")
            return
        if self.offline_queue:
            self._flush_offline_queue()
        self.drain_ops()
        if entry.failed:
            entry.failed = False
            raise VerificationFailedError("a delegated operation on this fd diverged")
        if entry.last_error is not None:
            status = entry.last_error
            entry.last_error = None
            _raise_status(status)
        self._persist_store()
        self._persist_meta()

    def select_validate(self, fd: int) -> str:
        """Validation barrier: resolve every pending verdict for this fd."""
        entry = self._fd(fd)
        if self.offline and entry.pending:
            raise OfflineError("pending validations cannot resolve while disconnected")
        self.drain_ops()
        if entry.failed:
            entry.failed = False
            return "AnyMismatch"
        return "AllMatch"

    def close(self, fd: int) -> None:
        entry = self._fd(fd)
        if self.offline:
            if entry.twin_unknown:
                del self.fds[fd]
                return
            # fd stays reserved until the buffered ops flush at reconnect.
            entry.closed = True
            self.offline_queue.append(("close", fd))
            return
        self.drain_ops()
        failed = entry.failed
        if not entry.twin_unknown:
            op = FileOp(OpCode.CLOSE, fd, 0, 0)
            pending = self._delegate(op, fd, entry.inode, entry.pos)
            self._drain_through(pending)
            failed = failed or not pending.verdict.is_match
        del self.fds[fd]
        if failed:
            raise VerificationFailedError("a delegated operation on this fd diverged")

    # -- emergency file -------------------------------------------------------------

    EMERGENCY_PATH = "__twinfs_emergency__"
    _EMERGENCY_SEGMENT_PAGES = 12  # single-file block limit

    def _create_emergency(self) -> None:
        """Pre-allocate the emergency extent, spanning files as needed."""
        pages = -(-self.config.emergency_bytes // BLOCK_SIZE)
        size = pages * BLOCK_SIZE
        self._capture_blocks = {}
        blocks: list[int] = []
        segments: list[dict] = []
        chunk = bytes(BLOCK_SIZE)
        remaining = pages
        index = 0
        while remaining > 0:
            seg_pages = min(remaining, self._EMERGENCY_SEGMENT_PAGES)
            path = "%s/s%d" % (self.EMERGENCY_PATH, index)
            fd = self.open(path, OpFlag.CREATE)
            inode = self.fds[fd].inode
            for _ in range(seg_pages):
                self.write(fd, chunk)
            self.fsync(fd)
            self.close(fd)
            for page in range(seg_pages):
                block = self._capture_blocks.get((inode, page))
                if block is None:
                    raise DeviceError("emergency pre-allocation failed to memoize")
                blocks.append(block)
            segments.append(
                {
                    "inode": inode,
                    "size": seg_pages * BLOCK_SIZE,
                    "tokens": [t.hex() for t in self.obfuscate(path)],
                }
            )
            remaining -= seg_pages
            index += 1
        self._capture_blocks = None
        self.emergency = {"size": size, "blocks": blocks, "segments": segments}
        self._memoize_emergency()
        self._persist_meta()

    def _emergency_span(self, offset: int, length: int) -> list[tuple[int, int, int]]:
        if self.emergency is None:
            raise DeviceError("no emergency file configured")
        if offset < 0 or offset + length > self.emergency["size"]:
            raise OutOfRangeError("beyond the pre-allocated emergency extent")
        spans = []
        cursor = offset
        end = offset + length
        while cursor < end:
            page = cursor // BLOCK_SIZE
            start = cursor % BLOCK_SIZE
            take = min(end - cursor, BLOCK_SIZE - start)
            spans.append((self.emergency["blocks"][page], start, take))
            cursor += take
        return spans

    def emergency_write(self, offset: int, data: bytes) -> int:
        """Durable write with zero network traffic at any connectivity state."""
        cursor = offset
        taken = 0
        per_seg = self._EMERGENCY_SEGMENT_PAGES
        segments = self.emergency["segments"]
        for block, start, take in self._emergency_span(offset, len(data)):
            raw = bytearray(self.store.read_block(block))
            raw[start : start + take] = data[taken : taken + take]
            self.store.write_block(block, bytes(raw))
            page = cursor // BLOCK_SIZE
            key = self._page_key(segments[page // per_seg]["inode"], page % per_seg)
            cached = self.cache.entries.get(key)
            if cached is not None:
                cached.page[:] = raw
                cached.dirty = False
                cached.trust = TRUSTED
                cached.valid = None
            cursor += take
            taken += take
        self._persist_store()
        return len(data)

    def emergency_read(self, offset: int, length: int) -> bytes:
        parts = []
        for block, start, take in self._emergency_span(offset, length):
            parts.append(self.store.read_block(block)[start : start + take])
        return b"".join(parts)

    # -- disconnection and recovery ----------------------------------------------------

    def reconnect_recover(self) -> None:
        """Resend unresolved 2PC decisions and flush buffered operations."""
        if self.offline:
            raise OfflineError("transport still severed")
        self._hello()
        for seq in sorted(self.intents):
            phase = self.intents[seq]
            if phase == "delegated":
                self._send(wire.NetKind.ABORT, seq)
                self.metrics.aborts_sent += 1
                self._expected.append({"kind": "ack", "op": "abort", "seq": seq})
                self.next_seq = min(self.next_seq, seq)
            else:
                self._send(wire.NetKind.COMMIT, seq)
                self.metrics.commits_sent += 1
                self._expected.append({"kind": "ack", "op": "commit", "seq": seq})
        self.drain_all()
        if self.offline_queue:
            self._flush_offline_queue()

    def _flush_offline_queue(self) -> None:
        if self._flushing:
            return
        self._flushing = True
        try:
            queued = self.offline_queue
            self.offline_queue = []
            for item in queued:
                if item[0] == "write":
                    _, fd, pos, length = item
                    entry = self.fds.get(fd)
                    if entry is None:
                        continue
                    saved = entry.pos
                    entry.pos = pos
                    self._realign_twins(fd, entry)
                    op = FileOp(OpCode.WRITE, fd, 0, length)
                    pending = self._delegate(op, fd, entry.inode, pos)
                    for page in range(pos // BLOCK_SIZE, (pos + length - 1) // BLOCK_SIZE + 1):
                        key = self._page_key(entry.inode, page)
                        if key not in pending.pages:
                            pending.pages.append(key)
                    entry.pos = max(saved, pos + length)
                    entry.twin_pos = pos + length
                elif item[0] == "close":
                    _, fd = item
                    entry = self.fds.get(fd)
                    if entry is not None and not entry.twin_unknown:
                        op = FileOp(OpCode.CLOSE, fd, 0, 0)
                        self._delegate(op, None, None, 0)
                    self.fds.pop(fd, None)
        finally:
            self._flushing = False

    def shutdown(self) -> None:
        if not self.offline:
            try:
                self.drain_all()
            except OfflineError:
                pass
        self.persist()

    def _memoize_evicted(self, key, entry: CacheEntry) -> None:
        if entry.block is not None and entry.trust == TRUSTED and not entry.dirty:
            self.memo.put(key, entry.block)


def _covers(ranges, start: int, end: int) -> bool:
    cursor = start
    for s, e in sorted(ranges):
        if s > cursor:
            break
        cursor = max(cursor, e)
        if cursor >= end:
            return True
    return cursor >= end
