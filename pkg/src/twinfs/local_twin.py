"""The untrusted local twin: the filesystem engine run outside trust.

The twin receives delegated FileOps over the 4KB channel, executes them with
the shared engine, and reaches all metadata through channel round trips that
the device core's stencil gate answers. Attack behaviors wrap the twin and
transform its honest output; the trusted core is never touched.
"""

from __future__ import annotations

from twinfs import wire
from twinfs.blockstore import BLOCK_SIZE
from twinfs.minifs import (
    AccessorRejected,
    Engine,
    FileOp,
    MetadataAccessor,
    OpOutcome,
    Status,
)


class SyncChannel:
    """In-process stand-in for the fixed-size shared-memory window.

    Every frame crossing in either direction is a full 4096-byte encoding
    pushed through a mailbox and offered to the taps, so confidentiality
    scans observe exactly what an off-core eavesdropper would.
    """

    def __init__(self, gate, twin):
        self.gate = gate  # callable(Frame) -> list[Frame]
        self.twin = twin
        self.taps: list = []
        self.to_twin = wire.FrameMailbox()
        self.to_device = wire.FrameMailbox()

    def _push(self, mailbox: wire.FrameMailbox, frame: wire.Frame) -> bytes:
        raw = wire.encode_frame(frame)
        for tap in self.taps:
            tap(raw)
        mailbox.send(raw)
        return raw

    def delegate(self, frames) -> list[wire.Frame]:
        """Device -> twin: deliver a FileOp, run the twin, collect its TRACE."""
        for frame in frames:
            self._push(self.to_twin, frame)
        inbound = [wire.decode_frame(self.to_twin.recv()) for _ in range(len(frames))]
        for frame in self.twin.execute(self, inbound):
            self._push(self.to_device, frame)
        out = []
        while len(self.to_device):
            out.append(wire.decode_frame(self.to_device.recv()))
        return out

    def meta_call(self, frames) -> list[wire.Frame]:
        """Twin -> device gate round trip for metadata blocks."""
        responses: list[wire.Frame] = []
        for frame in frames:
            self._push(self.to_device, frame)
            for resp in self.gate(wire.decode_frame(self.to_device.recv())):
                self._push(self.to_twin, resp)
                responses.append(wire.decode_frame(self.to_twin.recv()))
        return responses


class ChannelAccessor(MetadataAccessor):
    """Metadata reads/writes expressed as channel frames through the gate."""

    def __init__(self, channel: SyncChannel, seq: int):
        self.channel = channel
        self.seq = seq

    def read_meta(self, block_id: int) -> bytes:
        req = wire.Frame(
            wire.FrameKind.META_READ_REQ,
            self.seq,
            wire.FRAG_HEADER.pack(0) + block_id.to_bytes(4, "little"),
        )
        frames = self.channel.meta_call([req])
        if frames and frames[0].kind == wire.FrameKind.REJECT:
            raise AccessorRejected("block %d" % block_id)
        data = wire.reassemble_message(frames)
        if len(data) != BLOCK_SIZE:
            raise wire.LengthMismatch("metadata block is %d bytes" % len(data))
        return data

    def write_meta(self, block_id: int, data: bytes) -> None:
        blob = block_id.to_bytes(4, "little") + bytes(data)
        frames = wire.fragment_message(wire.FrameKind.META_WRITE_REQ, self.seq, blob)
        for resp in self.channel.meta_call(frames):
            if resp.kind == wire.FrameKind.REJECT:
                raise AccessorRejected("block %d" % block_id)


class EvilBehavior:
    """Pure transformation of the twin's honest behavior (attack seam)."""

    def on_outcome(self, op: FileOp, outcome: OpOutcome) -> OpOutcome:
        return outcome

    def after_engine(self, op: FileOp, accessor: ChannelAccessor, twin: "LocalTwin") -> None:
        pass

    def on_frames(self, op: FileOp, frames: list[wire.Frame], twin: "LocalTwin"):
        return frames


class LocalTwin:
    """Runs the shared engine against gate-served metadata."""

    def __init__(self, behavior: EvilBehavior | None = None):
        self.behavior = behavior or EvilBehavior()
        self.engine: Engine | None = None
        self.last_trace_frames: list[wire.Frame] = []

    def reset_engine(self) -> None:
        self.engine = None

    def execute(self, channel: SyncChannel, frames) -> list[wire.Frame]:
        blob = wire.reassemble_message(frames)
        op = wire.decode_fileop(blob, seq=frames[0].seq)
        accessor = ChannelAccessor(channel, op.seq)
        if self.engine is None:
            self.engine = Engine(accessor)
        else:
            self.engine.acc = accessor
        try:
            outcome = self.engine.exec_fileop(op)
        except AccessorRejected:
            outcome = OpOutcome(status=Status.REJECTED)
        try:
            self.behavior.after_engine(op, accessor, self)
        except AccessorRejected:
            outcome = OpOutcome(status=Status.REJECTED)
        outcome = self.behavior.on_outcome(op, outcome)
        out_frames = wire.fragment_message(
            wire.FrameKind.TRACE, op.seq, wire.encode_outcome(op.op, outcome)
        )
        out_frames = self.behavior.on_frames(op, out_frames, self)
        self.last_trace_frames = list(out_frames)
        return out_frames
