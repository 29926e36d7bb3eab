import socket
import struct
import threading
import zlib

import numpy as np
import pytest

from fedembed import data, federation as fed, wire
from fedembed.errors import ProtocolError


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def toy_setup(n=2, seed=5, **cfg_kw):
    base = dict(
        clients=n, identities_per_client=(4,) * n, feature_dim=8,
        embed_hidden=(6,), embed_dim=5, head_hidden=6, batch_size=8,
        epochs=3, seed=seed, barrier_timeout=20.0,
    )
    base.update(cfg_kw)
    cfg = fed.FederationConfig(**base)
    specs = [data.default_domain_spec(
        seed, d, num_identities=4, images_per_identity=6, feature_dim=8,
        latent_dim=3, cluster_spread=0.4, noise_scale=0.3,
        translation_scale=1.0, subspace_mix=0.5) for d in range(n)]
    return cfg, [data.generate_domain(s) for s in specs]


# ----------------------------------------------------------------- codec

def sample_messages():
    rng = np.random.default_rng(0)
    return [
        wire.Message(wire.MessageType.HELLO, 0, 3, b"abc123"),
        wire.Message(wire.MessageType.CONFIG, 0, 3, b"abc123"),
        wire.Message(wire.MessageType.GLOBAL_PARAMS, 7, 1,
                     b"\x01" + wire.pack_vectors([rng.standard_normal(11)])),
        wire.Message(wire.MessageType.UPDATE, 7, 1,
                     wire.pack_vectors([rng.standard_normal(11),
                                        rng.standard_normal(4)])),
        wire.Message(wire.MessageType.EPOCH_DONE, 9, 2),
        wire.Message(wire.MessageType.SHUTDOWN, 10, 0),
        wire.Message(wire.MessageType.ERROR, 2, 0, b"something broke"),
    ]


@pytest.mark.parametrize("msg", sample_messages(),
                         ids=[m.type.name for m in sample_messages()])
def test_message_round_trip(msg):
    assert wire.decode_message(wire.encode_message(msg)) == msg


def test_flipped_payload_bit_fails_crc():
    frame = bytearray(wire.encode_message(
        wire.Message(wire.MessageType.ERROR, 1, 2, b"payload")))
    frame[-6] ^= 0x01  # inside the payload
    with pytest.raises(wire.FrameChecksumError):
        wire.decode_message(bytes(frame))


def test_oversized_frame_rejected_both_ways():
    big = wire.Message(wire.MessageType.UPDATE, 0, 0, b"x" * 100)
    with pytest.raises(wire.FrameSizeError):
        wire.encode_message(big, max_frame=64)
    frame = wire.encode_message(big)
    with pytest.raises(wire.FrameSizeError):
        wire.decode_message(frame, max_frame=64)


def test_truncated_frame_rejected():
    frame = wire.encode_message(wire.Message(wire.MessageType.SHUTDOWN))
    with pytest.raises(wire.TruncatedFrameError):
        wire.decode_message(frame[:-3])
    with pytest.raises(wire.TruncatedFrameError):
        wire.decode_message(frame[:2])


def test_unknown_type_tag_rejected():
    body = struct.pack("<BIH", 250, 0, 0)
    frame = (struct.pack("<I", len(body) + 4) + body
             + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(wire.UnknownMessageTypeError):
        wire.decode_message(frame)


def test_pack_vectors_round_trip_and_truncation():
    rng = np.random.default_rng(1)
    vecs = [rng.standard_normal(5), rng.standard_normal(0), rng.standard_normal(9)]
    blob = wire.pack_vectors(vecs)
    out = wire.unpack_vectors(blob)
    assert len(out) == 3
    for a, b in zip(vecs, out):
        assert np.array_equal(a, b)
    with pytest.raises(wire.TruncatedFrameError):
        wire.unpack_vectors(blob[:-4])
    with pytest.raises(wire.TruncatedFrameError):
        wire.unpack_vectors(blob + b"\x00")


def test_payload_schema_carries_no_sample_data():
    # every message type is declared, and nothing may carry dataset samples
    assert set(wire.PAYLOAD_KINDS) == set(wire.MessageType)
    assert set(wire.PAYLOAD_KINDS.values()) <= {
        "parameter-vectors", "config-fingerprint", "empty", "text"}


def test_config_fingerprint_tracks_contract_fields():
    cfg, _ = toy_setup()
    assert wire.config_fingerprint(cfg) == wire.config_fingerprint(cfg)
    import dataclasses
    other = dataclasses.replace(cfg, temperature=2.5)
    assert wire.config_fingerprint(cfg) != wire.config_fingerprint(other)


# ----------------------------------------------------------------- loopback

def run_networked(cfg, datasets, tmp_path, port=None):
    port = port or free_port()
    paths = []
    for i, ds in enumerate(datasets):
        path = tmp_path / f"client_{i}.fdds"
        data.save_dataset(ds, path)
        paths.append(path)
    result = {}

    def server_main():
        result["server"], result["per_epoch"] = wire.serve(cfg, "127.0.0.1", port)

    server_thread = threading.Thread(target=server_main)
    server_thread.start()
    client_errors = []

    def client_main(cid, path):
        try:
            wire.run_client(cfg, cid, "127.0.0.1", port, path)
        except Exception as exc:  # surfaced by the caller
            client_errors.append((cid, exc))

    client_threads = [threading.Thread(target=client_main, args=(i, p))
                      for i, p in enumerate(paths)]
    import time
    time.sleep(0.05)
    for t in client_threads:
        t.start()
    for t in client_threads:
        t.join(timeout=30)
    server_thread.join(timeout=30)
    assert not server_thread.is_alive(), "server did not finish"
    if client_errors:
        raise client_errors[0][1]
    return result["server"], result["per_epoch"]


@pytest.mark.parametrize("cfg_kw", [
    {},
    {"fraction": 0.5},
    {"beta": 0.001, "noise_placement": "double"},
    {"strategy": "fedavg"},
])
def test_networked_run_matches_in_process_bitwise(tmp_path, cfg_kw):
    cfg, datasets = toy_setup(2, **cfg_kw)
    per_epoch_local = []
    fed_server, _ = fed.run_federation(
        cfg, datasets,
        on_epoch_end=lambda e, s, c, r: per_epoch_local.append(s.embed_values.copy()))
    net_server, per_epoch_net = run_networked(cfg, datasets, tmp_path)
    assert len(per_epoch_net) == len(per_epoch_local) == cfg.epochs
    for local, networked in zip(per_epoch_local, per_epoch_net):
        assert np.array_equal(local, networked)
    assert np.array_equal(fed_server.embed_values, net_server.embed_values)


def test_networked_runs_are_reproducible(tmp_path):
    cfg, datasets = toy_setup(2, epochs=2)
    a_server, a_epochs = run_networked(cfg, datasets, tmp_path)
    b_server, b_epochs = run_networked(cfg, datasets, tmp_path)
    for x, y in zip(a_epochs, b_epochs):
        assert np.array_equal(x, y)


def test_config_mismatch_rejected(tmp_path):
    import dataclasses
    cfg, datasets = toy_setup(1, epochs=1)
    port = free_port()
    wrong = dataclasses.replace(cfg, temperature=9.0)
    path = tmp_path / "d.fdds"
    data.save_dataset(datasets[0], path)
    server_exc = []

    def server_main():
        try:
            wire.serve(cfg, "127.0.0.1", port)
        except Exception as exc:
            server_exc.append(exc)

    t = threading.Thread(target=server_main)
    t.start()
    import time
    time.sleep(0.05)
    with pytest.raises(wire.RemoteError):
        wire.run_client(wrong, 0, "127.0.0.1", port, path)
    t.join(timeout=10)
    assert server_exc and isinstance(server_exc[0], ProtocolError)


def test_duplicate_client_id_rejected_but_run_survives(tmp_path):
    cfg, datasets = toy_setup(1, epochs=1)
    port = free_port()
    path = tmp_path / "d.fdds"
    data.save_dataset(datasets[0], path)
    result = {}

    def server_main():
        result["out"] = wire.serve(cfg, "127.0.0.1", port)

    t = threading.Thread(target=server_main)
    t.start()
    import time
    time.sleep(0.05)
    # an impostor with an out-of-range id is turned away with an ERROR
    impostor = socket.create_connection(("127.0.0.1", port), timeout=10)
    wire.send_message(impostor, wire.Message(wire.MessageType.HELLO, client_id=7,
                                             payload=wire.config_fingerprint(cfg)))
    reply = wire.read_message(impostor)
    assert reply.type == wire.MessageType.ERROR
    impostor.close()
    wire.run_client(cfg, 0, "127.0.0.1", port, path)
    t.join(timeout=10)
    assert "out" in result


def test_client_disconnect_mid_epoch_aborts_with_error(tmp_path):
    cfg, datasets = toy_setup(2, epochs=3)
    port = free_port()
    path = tmp_path / "d.fdds"
    data.save_dataset(datasets[0], path)
    server_exc = []

    def server_main():
        try:
            wire.serve(cfg, "127.0.0.1", port)
        except Exception as exc:
            server_exc.append(exc)

    t = threading.Thread(target=server_main)
    t.start()
    import time
    time.sleep(0.05)

    good_exc = []

    def good_client():
        try:
            wire.run_client(cfg, 0, "127.0.0.1", port, path)
        except Exception as exc:
            good_exc.append(exc)

    gt = threading.Thread(target=good_client)
    gt.start()

    # the second client handshakes, receives one broadcast, then vanishes
    bad = socket.create_connection(("127.0.0.1", port), timeout=10)
    wire.send_message(bad, wire.Message(wire.MessageType.HELLO, client_id=1,
                                        payload=wire.config_fingerprint(cfg)))
    assert wire.read_message(bad).type == wire.MessageType.CONFIG
    assert wire.read_message(bad).type == wire.MessageType.GLOBAL_PARAMS
    bad.close()

    t.join(timeout=20)
    gt.join(timeout=20)
    assert server_exc and isinstance(server_exc[0], ProtocolError)
    assert good_exc and isinstance(good_exc[0], (wire.RemoteError, wire.FrameError))


def test_unselected_client_gets_params_but_uploads_nothing():
    cfg, datasets = toy_setup(2, fraction=0.5, epochs=4)
    port = free_port()
    result = {}

    def server_main():
        result["out"] = wire.serve(cfg, "127.0.0.1", port)

    t = threading.Thread(target=server_main)
    t.start()
    import time
    time.sleep(0.05)

    received = {0: [], 1: []}

    def scripted_client(cid):
        sock = socket.create_connection(("127.0.0.1", port), timeout=10)
        wire.send_message(sock, wire.Message(wire.MessageType.HELLO, client_id=cid,
                                             payload=wire.config_fingerprint(cfg)))
        assert wire.read_message(sock).type == wire.MessageType.CONFIG
        while True:
            msg = wire.read_message(sock)
            if msg.type == wire.MessageType.SHUTDOWN:
                break
            assert msg.type == wire.MessageType.GLOBAL_PARAMS
            selected = bool(msg.payload[0])
            received[cid].append(selected)
            vectors = wire.unpack_vectors(msg.payload[1:])
            if selected:
                wire.send_message(sock, wire.Message(
                    wire.MessageType.UPDATE, msg.epoch, cid,
                    wire.pack_vectors([vectors[0]])))
            else:
                wire.send_message(sock, wire.Message(
                    wire.MessageType.EPOCH_DONE, msg.epoch, cid))
        sock.close()

    threads = [threading.Thread(target=scripted_client, args=(cid,)) for cid in (0, 1)]
    for th in threads:
        th.start()
    for th in threads:
        th.join(timeout=20)
    t.join(timeout=20)
    assert "out" in result
    # every client heard every epoch's broadcast, selected or not
    assert len(received[0]) == len(received[1]) == cfg.epochs
    # exactly one of the two was selected each epoch
    assert all(a != b for a, b in zip(received[0], received[1]))


def test_malformed_global_params_is_client_protocol_violation(tmp_path):
    cfg, datasets = toy_setup(1, epochs=1)
    port = free_port()
    path = tmp_path / "d.fdds"
    data.save_dataset(datasets[0], path)

    def fake_server():
        listener = socket.socket()
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(("127.0.0.1", port))
        listener.listen(1)
        conn, _ = listener.accept()
        hello = wire.read_message(conn)
        wire.send_message(conn, wire.Message(wire.MessageType.CONFIG,
                                             client_id=hello.client_id,
                                             payload=hello.payload))
        conn.sendall(b"\x0b\x00\x00\x00garbagebytes")  # valid length, junk body
        conn.close()
        listener.close()

    t = threading.Thread(target=fake_server)
    t.start()
    import time
    time.sleep(0.05)
    with pytest.raises(wire.FrameError):
        wire.run_client(cfg, 0, "127.0.0.1", port, path)
    t.join(timeout=10)
