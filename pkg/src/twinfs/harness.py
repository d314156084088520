"""Workload profiles, attack injection, crash exploration and reports.

Profiles model typical smart-device applications at desk scale: a camera
that periodically creates directories and appends fixed-length files, a
robot that appends a log and reads it back sequentially, a voice assistant
that scans small files, streams audio writes and stats its files, plus two
stress patterns. Every run drives the full stack against an in-memory file
oracle, records wire traffic for confidentiality scanning, and emits a JSON
report.
"""

from __future__ import annotations

import os
import random
import time
from dataclasses import dataclass

from twinfs.blockstore import BLOCK_SIZE, BlockStore
from twinfs.device_core import (
    CrashSignal,
    DeviceConfig,
    DeviceCore,
    MemoryDurability,
    VerificationFailedError,
)
from twinfs.local_twin import EvilBehavior, LocalTwin
from twinfs.minifs import OpCode, OpFlag, mkfs
from twinfs.replica import ReplicaSession
from twinfs.transport import (
    DelayedTransport,
    LoopbackTransport,
    RecordingTransport,
    TcpTransport,
)

PROFILES = ("camera", "voice", "robot", "stress-seq", "stress-rand")
ATTACKS = (
    "drop-write",
    "redirect-read",
    "redirect-write",
    "iago-data-request",
    "stale-trace-replay",
    "extra-request",
)
CRASH_POINTS = (
    "before_delegate",
    "after_replay_staged",
    "after_device_exec",
    "after_final_commit_sent",
    "after_replica_commit",
)

NEEDLE = 8


class TaintVault:
    """Detects any >=8-byte run of client payload in observed byte streams.

    Payloads are registered as every 8-byte window at stride 1; scanning a
    chunk checks each of its windows against that set, so any leaked
    contiguous payload run of at least 8 bytes is caught.
    """

    def __init__(self):
        self.needles: set[bytes] = set()
        self.hits: list[tuple[str, int]] = []
        self._chunks: list[tuple[str, bytes]] = []

    def register_payload(self, payload: bytes) -> None:
        view = bytes(payload)
        for i in range(len(view) - NEEDLE + 1):
            self.needles.add(view[i : i + NEEDLE])

    def observe(self, origin: str):
        def tap(raw: bytes) -> None:
            self._chunks.append((origin, raw))

        return tap

    def record(self, origin: str, raw: bytes) -> None:
        self._chunks.append((origin, raw))

    def scan(self) -> list[tuple[str, int]]:
        self.hits = []
        needles = self.needles
        if not needles:
            return self.hits
        for origin, chunk in self._chunks:
            view = bytes(chunk)
            for i in range(len(view) - NEEDLE + 1):
                if view[i : i + NEEDLE] in needles:
                    self.hits.append((origin, i))
                    break
        return self.hits

    @property
    def chunk_count(self) -> int:
        return len(self._chunks)


class FileModel:
    """Reference in-memory map of files; mirrors device API semantics."""

    def __init__(self):
        self.files: dict[str, bytearray] = {}
        self.fds: dict[int, tuple[str, int]] = {}
        self._next = 0

    def open(self, path: str, flags: int = 0) -> int:
        if path not in self.files:
            if not flags & OpFlag.CREATE:
                raise KeyError(path)
            self.files[path] = bytearray()
        if flags & OpFlag.TRUNC:
            self.files[path] = bytearray()
        fd = self._next
        self._next += 1
        self.fds[fd] = (path, 0)
        return fd

    def write(self, fd: int, data: bytes) -> int:
        path, pos = self.fds[fd]
        buf = self.files[path]
        if len(buf) < pos + len(data):
            buf.extend(bytes(pos + len(data) - len(buf)))
        buf[pos : pos + len(data)] = data
        self.fds[fd] = (path, pos + len(data))
        return len(data)

    def read(self, fd: int, length: int) -> bytes:
        path, pos = self.fds[fd]
        out = bytes(self.files[path][pos : pos + length])
        self.fds[fd] = (path, pos + len(out))
        return out

    def lseek(self, fd: int, offset: int, whence: int = 0) -> int:
        path, pos = self.fds[fd]
        size = len(self.files[path])
        base = (0, pos, size)[whence]
        pos = min(max(base + offset, 0), size)
        self.fds[fd] = (path, pos)
        return pos

    def fstat(self, fd: int) -> int:
        path, _ = self.fds[fd]
        return len(self.files[path])

    def close(self, fd: int) -> None:
        del self.fds[fd]


# -- attack behaviors ---------------------------------------------------------


class _CountedBehavior(EvilBehavior):
    """Applies a transformation to the next `count` matching operations."""

    def __init__(self, fire_at: int = 1, count: int = 1):
        self.fire_at = fire_at
        self.count = count
        self._seen = 0
        self.fired = 0

    def _should_fire(self) -> bool:
        self._seen += 1
        if self._seen >= self.fire_at and self.fired < self.count:
            self.fired += 1
            return True
        return False


class DropWrite(_CountedBehavior):
    def on_outcome(self, op, outcome):
        if op.op == OpCode.WRITE and outcome.trace and self._should_fire():
            outcome.trace = []
            outcome.segments = ()
            outcome.promote = None
        return outcome


class RedirectRead(_CountedBehavior):
    def on_outcome(self, op, outcome):
        if op.op == OpCode.READ and outcome.trace and self._should_fire():
            victim = outcome.trace[0]
            moved = type(victim)(victim.kind, (victim.block + 1) % (1 << 32))
            outcome.trace = [moved] + outcome.trace[1:]
            segs = list(outcome.segments)
            for i, seg in enumerate(segs):
                if seg.target == victim.block:
                    segs[i] = type(seg)(seg.kind, moved.block, seg.offset, seg.length, seg.fresh)
                    break
            outcome.segments = tuple(segs)
        return outcome


class RedirectWrite(_CountedBehavior):
    def on_outcome(self, op, outcome):
        if op.op == OpCode.WRITE and outcome.trace and self._should_fire():
            victim = outcome.trace[0]
            moved = type(victim)(victim.kind, (victim.block + 1) % (1 << 32))
            outcome.trace = [moved] + outcome.trace[1:]
            segs = list(outcome.segments)
            for i, seg in enumerate(segs):
                if seg.target == victim.block:
                    segs[i] = type(seg)(seg.kind, moved.block, seg.offset, seg.length, seg.fresh)
                    break
            outcome.segments = tuple(segs)
        return outcome


class ExtraRequest(_CountedBehavior):
    def on_outcome(self, op, outcome):
        if op.op in (OpCode.READ, OpCode.WRITE, OpCode.OPEN) and self._should_fire():
            from twinfs.minifs import BlockRequest, ReqKind

            outcome.trace = list(outcome.trace) + [BlockRequest(ReqKind.READ, 0)]
        return outcome


class IagoDataRequest(_CountedBehavior):
    """Requests a known file-data block over the metadata channel."""

    def after_engine(self, op, accessor, twin):
        target = self._find_data_block(twin)
        if target is None:
            return
        if self._should_fire():
            accessor.read_meta(target)  # the gate answers REJECT, raising
            # Served without a reject: the block was allocated by the very
            # op in flight and the gate does not know it as data yet. That
            # reveals nothing, so the probe retries on a later operation.
            self.fired -= 1

    def _find_data_block(self, twin) -> int | None:
        engine = twin.engine
        if engine is None:
            return None
        from twinfs.minifs import MODE_FILE

        for index in range(engine.sb.inode_count):
            inode = engine._read_inode(index)
            if inode.mode == MODE_FILE:
                for bid in inode.direct:
                    if bid:
                        return bid
        return None


class StaleTraceReplay(_CountedBehavior):
    """Resends the previous operation's trace frames, stale seq and all."""

    def __init__(self, fire_at: int = 2, count: int = 1):
        super().__init__(max(fire_at, 2), count)
        self._previous: list | None = None

    def on_frames(self, op, frames, twin):
        previous = self._previous
        self._previous = list(frames)
        if previous is not None and self._should_fire():
            return previous
        return frames


def inject_attack(kind: str, fire_at: int = 1, count: int = 1) -> EvilBehavior:
    table = {
        "drop-write": DropWrite,
        "redirect-read": RedirectRead,
        "redirect-write": RedirectWrite,
        "iago-data-request": IagoDataRequest,
        "stale-trace-replay": StaleTraceReplay,
        "extra-request": ExtraRequest,
    }
    try:
        cls = table[kind]
    except KeyError:
        raise ValueError("unknown attack %r (choose from %s)" % (kind, ", ".join(ATTACKS)))
    return cls(fire_at=fire_at, count=count)


# -- system assembly -------------------------------------------------------------


@dataclass
class System:
    device: DeviceCore
    session: ReplicaSession | None
    transport: DelayedTransport
    vault: TaintVault
    twin: LocalTwin

    def replica_digest(self) -> str:
        if self.session is not None:
            return self.session.durable_digest()
        try:
            return self.device.fetch_replica_digest()
        except Exception:
            return ""


def build_system(
    total_blocks: int = 4096,
    inode_count: int = 128,
    delay_ms: float = 0.0,
    attack: str | None = None,
    attack_at: int = 1,
    cache_pages: int = 64,
    stencil_source: str = "device",
    memo_enabled: bool = True,
    emergency_bytes: int = 0,
    vault: TaintVault | None = None,
    durability=None,
    crash_hook=None,
    replica_state_dir: str | None = None,
    replica_addr: tuple[str, int] | None = None,
    seed: int | None = None,
) -> System:
    image = mkfs(total_blocks, inode_count)
    store = BlockStore(total_blocks, dict(image.full_blocks))
    vault = vault or TaintVault()
    session = None
    if replica_addr is not None:
        base: object = TcpTransport(*replica_addr)
    else:
        session = ReplicaSession.bootstrap(image.metadata_image, state_dir=replica_state_dir)
        base = LoopbackTransport(session.handle_message)
    delayed = DelayedTransport(base, delay_ms)
    transport = RecordingTransport(delayed, vault.observe("net"))
    behavior = inject_attack(attack, fire_at=attack_at) if attack else None
    twin = LocalTwin(behavior)
    config = DeviceConfig(
        cache_pages=cache_pages,
        memo_enabled=memo_enabled,
        emergency_bytes=emergency_bytes,
        stencil_source=stencil_source,
        durable_data=durability is not None,
    )
    config.crash_hook = crash_hook
    meta = None
    if seed is not None:
        # Deterministic device identity so reports reproduce bit-for-bit.
        rng = random.Random(seed ^ 0x7477696E)
        meta = {"device_id": rng.randbytes(16).hex(), "prf_key": rng.randbytes(16).hex()}
    device = DeviceCore(store, transport, twin, config, durability=durability, meta=meta)
    device.channel.taps.append(vault.observe("channel"))
    return System(device, session, delayed, vault, twin)


# -- workload runner ----------------------------------------------------------------


class WorkloadRunner:
    """Drives the device and the oracle in lockstep, timing every call."""

    def __init__(self, system: System, seed: int = 0):
        self.system = system
        self.dev = system.device
        self.model = FileModel()
        self.vault = system.vault
        self.rng = random.Random(seed)
        self.latencies: dict[str, list[float]] = {}
        self.fd_map: dict[int, int] = {}
        self.ops = 0
        self.oracle_failures = 0
        self.detected = False

    def _timed(self, kind: str, fn):
        start = time.monotonic()
        try:
            return fn()
        finally:
            self.latencies.setdefault(kind, []).append((time.monotonic() - start) * 1e6)
            self.ops += 1

    def payload(self, size: int) -> bytes:
        data = self.rng.randbytes(size)
        self.vault.register_payload(data)
        return data

    def open(self, path: str, flags: int = 0) -> int:
        fd = self._timed("open", lambda: self.dev.open(path, flags))
        self.fd_map[fd] = self.model.open(path, flags)
        return fd

    def write(self, fd: int, data: bytes) -> int:
        n = self._timed("write", lambda: self.dev.write(fd, data))
        self.model.write(self.fd_map[fd], data)
        return n

    def read(self, fd: int, length: int, expect_oracle: bool = True) -> tuple[bytes, str]:
        data, trust = self._timed("read", lambda: self.dev.read(fd, length))
        expected = self.model.read(self.fd_map[fd], length)
        if expect_oracle and data != expected:
            self.oracle_failures += 1
        return data, trust

    def lseek(self, fd: int, offset: int, whence: int = 0) -> int:
        pos = self._timed("lseek", lambda: self.dev.lseek(fd, offset, whence))
        self.model.lseek(self.fd_map[fd], offset, whence)
        return pos

    def fstat(self, fd: int) -> int:
        size = self._timed("fstat", lambda: self.dev.fstat(fd))
        if size != self.model.fstat(self.fd_map[fd]):
            self.oracle_failures += 1
        return size

    def fsync(self, fd: int) -> None:
        try:
            self._timed("fsync", lambda: self.dev.fsync(fd))
        except (VerificationFailedError,) as exc:
            self.detected = True
            raise

    def barrier(self, fd: int) -> str:
        result = self._timed("select", lambda: self.dev.select_validate(fd))
        if result != "AllMatch":
            self.detected = True
        return result

    def close(self, fd: int) -> None:
        try:
            self._timed("close", lambda: self.dev.close(fd))
        except VerificationFailedError:
            self.detected = True
            raise
        finally:
            if fd in self.fd_map:
                self.model.close(self.fd_map.pop(fd))

    def cold_caches(self) -> None:
        self.dev.cache.clear_all()

    def forget_mappings(self) -> None:
        self.dev.memo.entries.clear()


@dataclass
class ProfileParams:
    iterations: int = 4
    files_per_iter: int = 2
    file_bytes: int = 16384
    chunk: int = 4096
    compute_ms: float = 0.0
    untrusted_reads: bool = False


def _run_camera(run: WorkloadRunner, p: ProfileParams) -> None:
    """Periodic directory creation plus append-only fixed-length files."""
    images = []
    for i in range(p.iterations):
        for j in range(p.files_per_iter):
            path = "d%03d/img%02d" % (i, j)
            fd = run.open(path, OpFlag.CREATE)
            for off in range(0, p.file_bytes, p.chunk):
                run.write(fd, run.payload(min(p.chunk, p.file_bytes - off)))
            run.fsync(fd)
            run.close(fd)
            images.append(path)
    # Processing pass over the captured images, cold.
    run.cold_caches()
    run.forget_mappings()
    flags = OpFlag.UNTRUSTED if p.untrusted_reads else 0
    for i, path in enumerate(images):
        fd = run.open(path, flags)
        data, _ = run.read(fd, p.file_bytes)
        if p.compute_ms:
            time.sleep(p.compute_ms / 1000.0)
        if p.untrusted_reads:
            run.barrier(fd)
        out = run.open(path + ".out", OpFlag.CREATE)
        run.write(out, run.payload(min(len(data), p.chunk)))
        run.fsync(out)
        run.close(out)
        run.close(fd)


def _run_voice(run: WorkloadRunner, p: ProfileParams) -> None:
    """Small-file skill scans, sequential wav writes, three fstats per run."""
    skills = []
    for j in range(3):
        path = "skills/s%02d" % j
        fd = run.open(path, OpFlag.CREATE)
        run.write(fd, run.payload(48))  # inline-sized skill description
        run.fsync(fd)
        run.close(fd)
        skills.append(path)
    for i in range(p.iterations):
        for path in skills:
            fd = run.open(path)
            run.read(fd, 48)
            run.close(fd)
        wav = run.open("wav/rec%03d" % i, OpFlag.CREATE)
        for off in range(0, p.file_bytes, p.chunk):
            run.write(wav, run.payload(min(p.chunk, p.file_bytes - off)))
            if off == 0:
                run.fstat(wav)
        run.fstat(wav)
        run.fsync(wav)
        run.fstat(wav)
        run.close(wav)


def _run_robot(run: WorkloadRunner, p: ProfileParams) -> None:
    """Append a log, read it back sequentially, write the result file."""
    log = run.open("oplog", OpFlag.CREATE)
    total = min(p.file_bytes * p.iterations, 12 * BLOCK_SIZE)
    for off in range(0, total, p.chunk):
        run.write(log, run.payload(min(p.chunk, total - off)))
        if (off // p.chunk) % 8 == 7:
            run.fsync(log)
    run.fsync(log)
    run.cold_caches()
    run.lseek(log, 0)
    for off in range(0, total, p.chunk):
        run.read(log, min(p.chunk, total - off))
    run.close(log)
    result = run.open("floormap", OpFlag.CREATE)
    for off in range(0, p.file_bytes, p.chunk):
        run.write(result, run.payload(min(p.chunk, p.file_bytes - off)))
    run.fsync(result)
    run.close(result)


def _run_stress_seq(run: WorkloadRunner, p: ProfileParams) -> None:
    fd = run.open("stress", OpFlag.CREATE)
    total = min(p.file_bytes * p.iterations, 12 * BLOCK_SIZE)
    for off in range(0, total, p.chunk):
        run.write(fd, run.payload(min(p.chunk, total - off)))
    run.fsync(fd)
    run.lseek(fd, 0)
    for off in range(0, total, p.chunk):
        run.read(fd, min(p.chunk, total - off))
    run.close(fd)


def _run_stress_rand(run: WorkloadRunner, p: ProfileParams) -> None:
    fds = [run.open("r%d" % i, OpFlag.CREATE) for i in range(3)]
    for _ in range(p.iterations * 8):
        fd = run.rng.choice(fds)
        action = run.rng.random()
        limit = 12 * BLOCK_SIZE
        if action < 0.5:
            run.lseek(fd, run.rng.randrange(0, limit))
            size = run.rng.randrange(1, p.chunk)
            pos = run.dev.fds[fd].pos
            if pos + size <= limit:
                run.write(fd, run.payload(size))
        elif action < 0.8:
            run.lseek(fd, run.rng.randrange(0, limit))
            run.read(fd, run.rng.randrange(1, p.chunk))
        else:
            run.fsync(fd)
    for fd in fds:
        run.fsync(fd)
        run.close(fd)


_PROFILE_RUNNERS = {
    "camera": _run_camera,
    "voice": _run_voice,
    "robot": _run_robot,
    "stress-seq": _run_stress_seq,
    "stress-rand": _run_stress_rand,
}


def _percentile(values, fraction: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    index = min(int(len(ordered) * fraction), len(ordered) - 1)
    return ordered[index]


def run_workload(
    profile: str,
    delay_ms: float = 0.0,
    attack: str | None = None,
    attack_at: int = 1,
    cache_pages: int = 64,
    stencil_source: str = "device",
    untrusted_reads: bool = False,
    compute_ms: float = 0.0,
    seed: int = 0,
    params: ProfileParams | None = None,
    replica_addr: tuple[str, int] | None = None,
) -> dict:
    if profile not in _PROFILE_RUNNERS:
        raise ValueError("unknown profile %r (choose from %s)" % (profile, ", ".join(PROFILES)))
    system = build_system(
        delay_ms=delay_ms,
        attack=attack,
        attack_at=attack_at,
        cache_pages=cache_pages,
        stencil_source=stencil_source,
        replica_addr=replica_addr,
        seed=seed,
    )
    p = params or ProfileParams()
    p.untrusted_reads = untrusted_reads
    p.compute_ms = compute_ms
    run = WorkloadRunner(system, seed=seed)
    start = time.monotonic()
    failure: str | None = None
    try:
        _PROFILE_RUNNERS[profile](run, p)
        system.device.shutdown()
    except VerificationFailedError as exc:
        run.detected = True
        failure = str(exc)
    elapsed = time.monotonic() - start
    all_latencies = [v for vs in run.latencies.values() for v in vs]
    hits = system.vault.scan()
    replica_state_hits = 0
    if system.session is not None:
        scan_vault = TaintVault()
        scan_vault.needles = system.vault.needles
        for blob in system.session.state_bytes():
            scan_vault.record("replica-state", blob)
        replica_state_hits = len(scan_vault.scan())
    metrics = system.device.metrics
    report = {
        "profile": profile,
        "delay_ms": delay_ms,
        "ops": run.ops,
        "rpc_count": metrics.rpc_total,
        "verdicts": {"match": metrics.matches, "mismatch": metrics.mismatches},
        "latency_us": {
            "p50": round(_percentile(all_latencies, 0.50), 1),
            "p95": round(_percentile(all_latencies, 0.95), 1),
        },
        "latency_us_by_op": {
            kind: {
                "p50": round(_percentile(vs, 0.50), 1),
                "p95": round(_percentile(vs, 0.95), 1),
            }
            for kind, vs in sorted(run.latencies.items())
        },
        "taint_clean": not hits and replica_state_hits == 0,
        "digests": {
            "device": system.device.device_metadata_digest(),
            "replica": system.replica_digest(),
        },
        "oracle_failures": run.oracle_failures,
        "attack": attack,
        "attack_detected": run.detected or metrics.mismatches > 0 or metrics.rejects_served > 0,
        "elapsed_s": round(elapsed, 3),
    }
    if failure:
        report["failure"] = failure
    return report


# -- crash exploration -----------------------------------------------------------------


def _metadata_op_script(ops: int, seed: int) -> list[tuple]:
    """A deterministic log of metadata-changing operations."""
    rng = random.Random(seed)
    script: list[tuple] = []
    created: list[str] = []
    for i in range(ops):
        roll = rng.random()
        if not created or roll < 0.4:
            path = "c%02d/f%02d" % (rng.randrange(3), i)
            script.append(("create_write", path, rng.randrange(1, 3) * BLOCK_SIZE))
            created.append(path)
        elif roll < 0.7:
            script.append(("append", rng.choice(created), rng.randrange(1, 2) * BLOCK_SIZE))
        else:
            script.append(("truncate", rng.choice(created)))
    return script


def _apply_script_op(device: DeviceCore, op: tuple, payload_seed: int) -> None:
    rng = random.Random(payload_seed)
    if op[0] == "create_write":
        fd = device.open(op[1], OpFlag.CREATE)
        device.write(fd, rng.randbytes(op[2]))
        device.fsync(fd)
        device.close(fd)
    elif op[0] == "append":
        fd = device.open(op[1], OpFlag.CREATE)
        device.lseek(fd, 0, 2)
        device.write(fd, rng.randbytes(op[2]))
        device.fsync(fd)
        device.close(fd)
    elif op[0] == "truncate":
        fd = device.open(op[1], OpFlag.TRUNC)
        device.fsync(fd)
        device.close(fd)


def explore_crashes(
    ops: int = 6,
    seeds=(0,),
    points=CRASH_POINTS,
    state_root: str | None = None,
    total_blocks: int = 512,
    inode_count: int = 64,
) -> dict:
    """Crash at every (op index, protocol step) pair and check convergence.

    Each scenario runs a fresh system, executes the op log until the chosen
    crash fires, restarts both sides from durable state, runs recovery, and
    compares metadata digests.
    """
    import shutil
    import tempfile

    own_root = state_root is None
    state_root = state_root or tempfile.mkdtemp(prefix="twinfs-crash-")
    scenarios = 0
    converged = 0
    failures = []
    try:
        for seed in seeds:
            script = _metadata_op_script(ops, seed)
            for op_index in range(len(script)):
                for point in points:
                    scenarios += 1
                    outcome = _one_crash_scenario(
                        script, op_index, point, state_root, total_blocks, inode_count, seed
                    )
                    if outcome is None:
                        converged += 1
                    else:
                        failures.append(
                            {"seed": seed, "op_index": op_index, "point": point, "detail": outcome}
                        )
    finally:
        if own_root:
            shutil.rmtree(state_root, ignore_errors=True)
    return {
        "scenarios": scenarios,
        "converged": converged,
        "failures": failures,
        "ops_per_log": ops,
        "points": list(points),
    }


def _one_crash_scenario(
    script, op_index: int, point: str, state_root: str, total_blocks: int,
    inode_count: int, seed: int,
) -> str | None:
    import shutil

    replica_dir = os.path.join(state_root, "replica")
    shutil.rmtree(replica_dir, ignore_errors=True)
    durability = MemoryDurability()

    fired = {"armed": False}

    def hook(p: str, seq: int) -> None:
        if fired["armed"] and p == point:
            fired["armed"] = False
            raise CrashSignal(p, seq)

    system = build_system(
        total_blocks=total_blocks,
        inode_count=inode_count,
        durability=durability,
        crash_hook=hook,
        replica_state_dir=replica_dir,
    )
    device = system.device
    device.persist()
    crashed = False
    try:
        for i, op in enumerate(script):
            fired["armed"] = i == op_index
            _apply_script_op(device, op, payload_seed=seed * 1000 + i)
        device.shutdown()
    except CrashSignal:
        crashed = True
    if not crashed:
        # The op log never reached the crash point (vacuously converged).
        dd = device.device_metadata_digest()
        rd = system.session.durable_digest()
        system.session.close()
        return None if dd == rd else "no-crash digest mismatch"
    system.session.close()

    restarted = ReplicaSession.load(os.path.join(state_root, "replica"))
    transport = DelayedTransport(LoopbackTransport(restarted.handle_message), 0)
    config = DeviceConfig(emergency_bytes=0, durable_data=True)
    try:
        device2 = DeviceCore.load(durability, transport, LocalTwin(), config)
        device2.reconnect_recover()
    except Exception as exc:  # recovery must never fail
        restarted.close()
        return "recovery error: %r" % (exc,)
    dd = device2.device_metadata_digest()
    rd = restarted.durable_digest()
    restarted.close()
    if dd != rd:
        return "digest divergence device=%s replica=%s" % (dd[:12], rd[:12])
    return None


# -- microbenchmark ----------------------------------------------------------------------


def bench_iozone_like(mode: str, size: int, chunk: int = BLOCK_SIZE, seed: int = 0) -> dict:
    """Read/write throughput with the stencil gate on versus bypassed.

    The gate-off run serves every metadata block verbatim (no classification,
    redaction or merge), isolating the gate's marginal cost; a raw blockstore
    pass is reported for context.
    """
    if mode not in ("seq-write", "seq-read", "rand-write", "rand-read"):
        raise ValueError("mode must be one of seq-write, seq-read, rand-write, rand-read")
    size = min(max(size, chunk), 4 * 1024 * 1024)
    span_max = 12 * BLOCK_SIZE

    def stack_run(gate: bool) -> float:
        system = build_system(total_blocks=8192, inode_count=128)
        system.device.config.gate_enabled = gate
        dev = system.device
        rng = random.Random(seed)
        spans = []
        remaining = size
        index = 0
        while remaining > 0:
            spans.append(("b%d" % index, min(remaining, span_max)))
            remaining -= span_max
            index += 1

        def prefill():
            fds = {}
            for name, span in spans:
                fd = dev.open(name, OpFlag.CREATE)
                for off in range(0, span, chunk):
                    dev.write(fd, rng.randbytes(min(chunk, span - off)))
                dev.fsync(fd)
                fds[name] = fd
            return fds

        if mode == "seq-write":
            start = time.monotonic()
            fds = prefill()
            elapsed = time.monotonic() - start
        else:
            fds = prefill()
            dev.cache.clear_all()
            dev.memo.entries.clear()
            start = time.monotonic()
            for name, span in spans:
                fd = fds[name]
                offsets = list(range(0, span, chunk))
                if "rand" in mode:
                    rng.shuffle(offsets)
                for off in offsets:
                    dev.lseek(fd, off)
                    if "write" in mode:
                        dev.write(fd, rng.randbytes(min(chunk, span - off)))
                    else:
                        dev.read(fd, min(chunk, span - off))
                if "write" in mode:
                    dev.fsync(fd)
            elapsed = time.monotonic() - start
        for fd in fds.values():
            dev.close(fd)
        return elapsed

    def native_run() -> float:
        image = mkfs(8192, 128)
        store = BlockStore(8192, dict(image.full_blocks))
        rng = random.Random(seed)
        blocks = size // BLOCK_SIZE + 1
        order = list(range(blocks))
        if "rand" in mode:
            rng.shuffle(order)
        start = time.monotonic()
        for i in order:
            bid = image.superblock.data_start + (i % (8192 - image.superblock.data_start))
            if "write" in mode:
                store.write_block(bid, rng.randbytes(BLOCK_SIZE))
            else:
                store.read_block(bid)
        return time.monotonic() - start

    gated_s = stack_run(True)
    ungated_s = max(stack_run(False), 1e-9)
    native_s = max(native_run(), 1e-9)
    return {
        "mode": mode,
        "bytes": size,
        "gated_seconds": round(gated_s, 4),
        "ungated_seconds": round(ungated_s, 4),
        "native_seconds": round(native_s, 4),
        "gated_mb_per_s": round(size / max(gated_s, 1e-9) / 1e6, 2),
        "ungated_mb_per_s": round(size / ungated_s / 1e6, 2),
        "gate_overhead": round(gated_s / ungated_s, 3),
    }
