"""Networked execution: framed binary client/server parameter exchange.

Frame layout (little-endian): a u32 length counting every following byte,
then u8 message type, u32 epoch, u16 client id, payload, and a trailing u32
CRC32 over type..payload. Parameter payloads are vectors of 64-bit floats
behind a small shape header; no message can carry dataset samples, so the
protocol cannot leak training data by construction.

The server drives the same :class:`~fedembed.federation.ServerCoordinator`
the in-process simulator uses, and clients run the same local-round code, so
a networked run is bit-identical to an in-process run with the same config.
"""

from __future__ import annotations

import hashlib
import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .data import load_dataset
from .errors import ProtocolError
from .federation import (
    BroadcastPayload,
    FederationConfig,
    ModelUpdate,
    ServerCoordinator,
    ServerState,
    apply_broadcast,
    build_client,
    init_expert,
    local_round,
)

DEFAULT_MAX_FRAME = 1 << 24  # 16 MiB, far above any desk-scale parameter vector
_HEADER = struct.Struct("<BIH")  # type, epoch, client id


class MessageType(IntEnum):
    HELLO = 1
    CONFIG = 2
    GLOBAL_PARAMS = 3
    UPDATE = 4
    EPOCH_DONE = 5
    SHUTDOWN = 6
    ERROR = 7


# What each message type may carry; anything else is a protocol violation.
PAYLOAD_KINDS = {
    MessageType.HELLO: "config-fingerprint",
    MessageType.CONFIG: "config-fingerprint",
    MessageType.GLOBAL_PARAMS: "parameter-vectors",
    MessageType.UPDATE: "parameter-vectors",
    MessageType.EPOCH_DONE: "empty",
    MessageType.SHUTDOWN: "empty",
    MessageType.ERROR: "text",
}


class FrameError(ProtocolError):
    """Base class for frame-level decode failures."""


class TruncatedFrameError(FrameError):
    pass


class FrameChecksumError(FrameError):
    pass


class UnknownMessageTypeError(FrameError):
    pass


class FrameSizeError(FrameError):
    pass


class RemoteError(ProtocolError):
    """The peer reported an error and aborted the run."""


@dataclass(frozen=True)
class Message:
    type: MessageType
    epoch: int = 0
    client_id: int = 0
    payload: bytes = b""


def encode_message(msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    body = _HEADER.pack(int(msg.type), msg.epoch, msg.client_id) + msg.payload
    frame_len = len(body) + 4
    if 4 + frame_len > max_frame:
        raise FrameSizeError(f"frame of {4 + frame_len} bytes exceeds limit {max_frame}")
    return struct.pack("<I", frame_len) + body + struct.pack("<I", zlib.crc32(body))


def decode_message(frame: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Message:
    if len(frame) < 4:
        raise TruncatedFrameError(f"frame prefix needs 4 bytes, got {len(frame)}")
    (length,) = struct.unpack("<I", frame[:4])
    if 4 + length > max_frame:
        raise FrameSizeError(f"declared frame of {4 + length} bytes exceeds limit {max_frame}")
    if len(frame) != 4 + length:
        raise TruncatedFrameError(f"frame declares {length} bytes, carries {len(frame) - 4}")
    if length < _HEADER.size + 4:
        raise TruncatedFrameError(f"frame body of {length} bytes is below the minimum")
    body, (stored_crc,) = frame[4:-4], struct.unpack("<I", frame[-4:])
    actual = zlib.crc32(body)
    if stored_crc != actual:
        raise FrameChecksumError(f"crc mismatch: stored {stored_crc:#010x}, "
                                 f"computed {actual:#010x}")
    type_code, epoch, client_id = _HEADER.unpack(body[:_HEADER.size])
    try:
        mtype = MessageType(type_code)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type tag {type_code}") from None
    return Message(mtype, epoch, client_id, body[_HEADER.size:])


def pack_vectors(vectors: list[np.ndarray]) -> bytes:
    """Shape header (count + per-vector length) followed by raw little-endian f64."""
    parts = [struct.pack("<B", len(vectors))]
    for v in vectors:
        v = np.ascontiguousarray(v, dtype="<f8").ravel()
        parts.append(struct.pack("<I", v.size))
    for v in vectors:
        parts.append(np.ascontiguousarray(v, dtype="<f8").ravel().tobytes())
    return b"".join(parts)


def unpack_vectors(payload: bytes) -> list[np.ndarray]:
    if len(payload) < 1:
        raise TruncatedFrameError("parameter payload is empty")
    (count,) = struct.unpack("<B", payload[:1])
    off = 1
    sizes = []
    for _ in range(count):
        if off + 4 > len(payload):
            raise TruncatedFrameError("parameter payload shape header is truncated")
        (n,) = struct.unpack("<I", payload[off:off + 4])
        sizes.append(n)
        off += 4
    vectors = []
    for n in sizes:
        end = off + 8 * n
        if end > len(payload):
            raise TruncatedFrameError("parameter payload values are truncated")
        vectors.append(np.frombuffer(payload[off:end], dtype="<f8").copy())
        off = end
    if off != len(payload):
        raise TruncatedFrameError(f"{len(payload) - off} trailing bytes in parameter payload")
    return vectors


def config_fingerprint(config: FederationConfig) -> bytes:
    return hashlib.sha256(config.canonical_text().encode()).hexdigest().encode()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise TruncatedFrameError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> Message:
    prefix = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", prefix)
    if 4 + length > max_frame:
        raise FrameSizeError(f"declared frame of {4 + length} bytes exceeds limit {max_frame}")
    return decode_message(prefix + _recv_exact(sock, length), max_frame)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def _broadcast_message(payload: BroadcastPayload, client_id: int) -> Message:
    vectors = [payload.embed_values]
    if payload.head_values is not None:
        vectors.append(payload.head_values)
    body = struct.pack("<B", int(payload.selected)) + pack_vectors(vectors)
    return Message(MessageType.GLOBAL_PARAMS, payload.epoch, client_id, body)


def _parse_broadcast(msg: Message) -> BroadcastPayload:
    if len(msg.payload) < 1:
        raise TruncatedFrameError("global-parameter payload is empty")
    selected = bool(msg.payload[0])
    vectors = unpack_vectors(msg.payload[1:])
    if len(vectors) not in (1, 2):
        raise ProtocolError(f"global-parameter payload has {len(vectors)} vectors")
    return BroadcastPayload(epoch=msg.epoch, selected=selected,
                            embed_values=vectors[0],
                            head_values=vectors[1] if len(vectors) == 2 else None)


def _update_message(update: ModelUpdate, epoch: int) -> Message:
    vectors = [update.embed_values]
    if update.head_values is not None:
        vectors.append(update.head_values)
    return Message(MessageType.UPDATE, epoch, update.client_id, pack_vectors(vectors))


def _parse_update(msg: Message, expects_head: bool) -> ModelUpdate:
    vectors = unpack_vectors(msg.payload)
    if len(vectors) != (2 if expects_head else 1):
        raise ProtocolError(
            f"update from client {msg.client_id} has {len(vectors)} vectors, "
            f"expected {2 if expects_head else 1}")
    return ModelUpdate(client_id=msg.client_id, embed_values=vectors[0],
                       head_values=vectors[1] if expects_head else None)


def serve(config: FederationConfig, host: str, port: int
          ) -> tuple[ServerState, list[np.ndarray]]:
    """Coordinate a networked run; returns final state and per-epoch global params.

    Waits for all configured clients to HELLO, then per epoch sends every
    client the global parameters (selection piggybacked), collects an UPDATE
    from each selected client and an EPOCH_DONE from the rest, aggregates,
    and finally SHUTDOWNs everyone. Any failure mid-run is reported to all
    connected clients as an ERROR before the exception propagates.
    """
    fingerprint = config_fingerprint(config)
    conns: dict[int, socket.socket] = {}
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((host, port))
        listener.listen(config.clients)
        listener.settimeout(config.barrier_timeout)
        while len(conns) < config.clients:
            sock, _ = listener.accept()
            sock.settimeout(config.barrier_timeout)
            try:
                hello = read_message(sock)
            except FrameError as exc:
                sock.close()
                raise ProtocolError(f"handshake failed: {exc}") from exc
            if hello.type != MessageType.HELLO:
                send_message(sock, Message(MessageType.ERROR,
                                           payload=b"expected HELLO"))
                sock.close()
                raise ProtocolError(f"expected HELLO, got {hello.type.name}")
            cid = hello.client_id
            if not 0 <= cid < config.clients or cid in conns:
                send_message(sock, Message(MessageType.ERROR, client_id=cid,
                                           payload=b"duplicate or invalid client id"))
                sock.close()
                continue
            if hello.payload != fingerprint:
                send_message(sock, Message(MessageType.ERROR, client_id=cid,
                                           payload=b"configuration mismatch"))
                sock.close()
                raise ProtocolError(f"client {cid} config fingerprint mismatch")
            conns[cid] = sock
            send_message(sock, Message(MessageType.CONFIG, client_id=cid,
                                       payload=fingerprint))

        coordinator = ServerCoordinator(config)
        per_epoch: list[np.ndarray] = []
        try:
            for _ in range(config.epochs):
                plan = coordinator.begin_epoch()
                for cid in sorted(conns):
                    send_message(conns[cid],
                                 _broadcast_message(plan.payloads[cid], cid))
                updates: dict[int, ModelUpdate] = {}
                for cid in sorted(conns):
                    msg = read_message(conns[cid])
                    if msg.client_id != cid or msg.epoch != plan.epoch:
                        raise ProtocolError(
                            f"frame from client {msg.client_id} epoch {msg.epoch} on "
                            f"connection {cid} during epoch {plan.epoch}")
                    if cid in plan.selected:
                        if msg.type != MessageType.UPDATE:
                            raise ProtocolError(
                                f"selected client {cid} sent {msg.type.name}, expected UPDATE")
                        updates[cid] = _parse_update(msg, config.aggregates_full_model)
                    else:
                        if msg.type != MessageType.EPOCH_DONE:
                            raise ProtocolError(
                                f"unselected client {cid} sent {msg.type.name}, "
                                f"expected EPOCH_DONE")
                coordinator.finish_epoch(plan, updates)
                per_epoch.append(coordinator.server.embed_values.copy())
        except Exception as exc:
            note = str(exc).encode()[:4096]
            for sock in conns.values():
                try:
                    send_message(sock, Message(MessageType.ERROR, payload=note))
                except OSError:
                    pass
            raise
        for cid in sorted(conns):
            send_message(conns[cid], Message(MessageType.SHUTDOWN, client_id=cid))
        return coordinator.server, per_epoch
    finally:
        for sock in conns.values():
            sock.close()
        listener.close()


def run_client(config: FederationConfig, client_id: int, host: str, port: int,
               dataset_path) -> None:
    """Participate in a networked run as one client.

    Loads the local dataset, handshakes, then loops broadcast -> local round
    -> upload (when selected) until SHUTDOWN. Only parameter vectors ever go
    on the wire. Raises ProtocolError subtypes on any protocol violation and
    RemoteError if the server aborts.
    """
    dataset = load_dataset(dataset_path)
    fingerprint = config_fingerprint(config)
    sock = socket.create_connection((host, port), timeout=config.barrier_timeout)
    try:
        send_message(sock, Message(MessageType.HELLO, client_id=client_id,
                                   payload=fingerprint))
        reply = read_message(sock)
        if reply.type == MessageType.ERROR:
            raise RemoteError(reply.payload.decode(errors="replace"))
        if reply.type != MessageType.CONFIG or reply.payload != fingerprint:
            raise ProtocolError("server configuration does not match this client's")
        client = build_client(config, client_id, dataset)
        while True:
            msg = read_message(sock)
            if msg.type == MessageType.SHUTDOWN:
                return
            if msg.type == MessageType.ERROR:
                raise RemoteError(msg.payload.decode(errors="replace"))
            if msg.type != MessageType.GLOBAL_PARAMS:
                raise ProtocolError(f"expected GLOBAL_PARAMS, got {msg.type.name}")
            payload = _parse_broadcast(msg)
            apply_broadcast(client, payload, config)
            init_expert(client, config)
            if config.reset_momentum_each_epoch:
                for opt in client.optimizers():
                    opt.reset()
            update, _ = local_round(client, config, msg.epoch)
            if payload.selected:
                send_message(sock, _update_message(update, msg.epoch))
            else:
                send_message(sock, Message(MessageType.EPOCH_DONE, msg.epoch, client_id))
    finally:
        sock.close()
