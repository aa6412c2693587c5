"""Parameter sets and a loopback runner shared across test modules."""

import threading

import numpy as np

from privquery.codec import H_35_6, ParityCheckMatrix
from privquery.protocol import ProtocolParams
from privquery.protocol.transport import connect, serve
from privquery.states import ChannelModel, StateGeometry

MEASURED = (0.161, 0.044, 0.4124)


def small_code():
    return ParityCheckMatrix(np.array([[1, 0, 1], [0, 1, 1]], dtype=np.uint8))


def make_params(N=100, H=None, channel=None, theta=35.6, **kw):
    H = small_code() if H is None else H
    channel = ChannelModel.physical(theta) if channel is None else channel
    return ProtocolParams(geometry=StateGeometry(theta), H=H, N=N, channel=channel, **kw)


def measured_params(N=10_000, **kw):
    return make_params(N=N, H=H_35_6(), channel=ChannelModel.direct(*MEASURED), **kw)


def noiseless_params(N=100, **kw):
    # every sifted bit is correct, so every block decodes with e_k = 0
    return make_params(N=N, channel=ChannelModel.direct(0.5, 0.0, 0.0), **kw)


def loopback(dave_params, ursula_params, database, j, seed=1, record=False, timeout=20,
             **serve_kw):
    """Serve Dave on an ephemeral port in a thread and connect Ursula to it."""
    ready = threading.Event()
    addr, box = {}, {}

    def on_ready(a):
        addr["a"] = a
        ready.set()

    def server():
        box["dave"] = serve(dave_params, database, "127.0.0.1:0", seed=seed, ready=on_ready,
                            record=record, timeout=timeout, **serve_kw)[0]

    t = threading.Thread(target=server, daemon=True)
    t.start()
    assert ready.wait(10)
    host, port = addr["a"]
    ursula = connect(ursula_params, f"{host}:{port}", j, seed=seed, record=record,
                     timeout=timeout)
    t.join(timeout)
    return box["dave"], ursula
