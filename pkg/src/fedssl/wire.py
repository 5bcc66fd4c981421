"""Optional wire mode: the round protocol as framed messages over channels.

Client/server traffic is encoded as length-prefixed binary records so the
protocol layer can be exercised as a message-passing state machine.  Each
frame is ``u32 body length`` followed by the body: ``u8 message type``,
``u32 round``, ``u32 client id``, and (except for CLOSE) a serialized
parameter payload.  Clients run as independent serve loops; the server
drives rounds by dispatching UPDATE frames and collecting UPLOAD frames.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass

from .data import two_view_batch
from .federation import (FedEma, Runtime, apply_update, init_runtime,
                         post_aggregate_autoscale, select_clients)
from .methods import local_train
from .params import NamedParams, weighted_average
from .seeding import derive_rng

MSG_UPDATE = 1   # server -> client: global model for this round
MSG_UPLOAD = 2   # client -> server: trained online network
MSG_CLOSE = 3    # server -> client: stop serving

_HEADER = struct.Struct("<BII")


@dataclass(frozen=True)
class Message:
    msg_type: int
    round: int
    client_id: int
    payload: NamedParams | None = None


def encode_message(msg: Message) -> bytes:
    body = _HEADER.pack(msg.msg_type, msg.round, msg.client_id)
    if msg.payload is not None:
        body += msg.payload.to_bytes()
    return struct.pack("<I", len(body)) + body


def decode_message(frame: bytes) -> Message:
    (length,) = struct.unpack_from("<I", frame, 0)
    body = frame[4:]
    if len(body) != length:
        raise ValueError(f"frame length {len(body)} != header {length}")
    msg_type, round_, client_id = _HEADER.unpack_from(body, 0)
    payload = NamedParams.from_bytes(body[_HEADER.size:]) if len(body) > _HEADER.size else None
    return Message(msg_type, round_, client_id, payload)


class Endpoint:
    """One side of an in-process duplex byte channel."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: Message) -> None:
        self._outbox.put(encode_message(msg))

    def recv(self, timeout: float | None = None) -> Message:
        return decode_message(self._inbox.get(timeout=timeout))


def duplex_channel() -> tuple[Endpoint, Endpoint]:
    """(server side, client side) endpoints of one in-process channel."""
    to_client: queue.Queue = queue.Queue()
    to_server: queue.Queue = queue.Queue()
    return Endpoint(to_server, to_client), Endpoint(to_client, to_server)


class WireClient:
    """Client-side state machine: consumes UPDATE frames, emits UPLOAD frames.

    Model state crosses the channel by value, mimicking a real
    upload/download cycle: the client applies the decoded payload, trains
    locally, and sends its online network back.
    """

    def __init__(self, rt: Runtime, client_id: int, endpoint: Endpoint):
        self.rt = rt
        self.client = rt.server.clients[client_id]
        self.endpoint = endpoint

    def handle(self, msg: Message) -> bool:
        """Process one frame; returns False once closed."""
        if msg.msg_type == MSG_CLOSE:
            return False
        if msg.msg_type != MSG_UPDATE or msg.payload is None:
            raise ValueError(f"client got unexpected message type {msg.msg_type}")
        cfg = self.rt.cfg
        k, r = self.client.id, msg.round
        apply_update(self.client, msg.payload, self.rt.server.strategy, r,
                     cfg.divergence_group_names())
        aug = cfg.aug_spec()
        aug_rng = derive_rng(cfg.seed, "aug", k, r)
        local_train(self.client.nets, self.rt.method, self.client.samples,
                    cfg.local_epochs, cfg.batch_size, self.client.opt,
                    derive_rng(cfg.seed, "train", k, r),
                    lambda batch: two_view_batch(batch, aug, aug_rng))
        self.endpoint.send(Message(MSG_UPLOAD, r, k, self.client.nets.upload_params()))
        return True

    def serve(self) -> None:
        while self.handle(self.endpoint.recv()):
            pass


def run_round_wire(rt: Runtime, channels: dict[int, Endpoint]) -> list[int]:
    """Drive one round purely through framed messages.

    ``channels`` maps client id to the server-side endpoint of that client's
    channel.  Dispatch, training, upload, aggregation and scaler calibration
    follow the in-process round exactly, so both drivers produce identical
    trajectories.
    """
    cfg = rt.cfg
    server = rt.server
    if server.strategy is None:
        raise ValueError("wire mode requires a communicating strategy")
    r = server.round
    selected = select_clients(server.clients.keys(), cfg.participants_per_round(),
                              derive_rng(cfg.seed, "select", r))
    for k in selected:
        channels[k].send(Message(MSG_UPDATE, r, k, server.global_params))
    uploads: dict[int, NamedParams] = {}
    for k in selected:
        reply = channels[k].recv()
        if reply.msg_type != MSG_UPLOAD or reply.round != r or reply.client_id != k:
            raise ValueError(f"unexpected reply for round {r} client {k}")
        uploads[k] = reply.payload
    entries = [(uploads[k], float(server.clients[k].n_k)) for k in selected]
    server.global_params = weighted_average(entries)
    if isinstance(server.strategy, FedEma) and server.strategy.autoscaled:
        post_aggregate_autoscale(server, selected, uploads, server.strategy.tau,
                                 cfg.divergence_group_names())
    for k in selected:
        server.clients[k].last_selected_round = r
    server.round += 1
    return selected


def run_experiment_wire(cfg) -> NamedParams:
    """Run a full experiment over channels; returns the final global params."""
    rt = init_runtime(cfg)
    channels: dict[int, Endpoint] = {}
    threads = []
    for k in rt.server.clients:
        server_end, client_end = duplex_channel()
        channels[k] = server_end
        worker = WireClient(rt, k, client_end)
        t = threading.Thread(target=worker.serve, name=f"wire-client-{k}", daemon=True)
        t.start()
        threads.append(t)
    try:
        for _ in range(cfg.rounds):
            run_round_wire(rt, channels)
    finally:
        for k, ch in channels.items():
            ch.send(Message(MSG_CLOSE, rt.server.round, k))
        for t in threads:
            t.join(timeout=10)
    return rt.server.global_params
